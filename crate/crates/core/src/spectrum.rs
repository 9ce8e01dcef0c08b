//! Mechanical power spectra and the microwave-to-optical scattering spectrum.
//!
//! Spectra are single-sided densities on the mechanical band; the optical
//! carrier is implicit. A mode with optomechanical coupling `g_j` scatters
//! pump photons into the sideband at `γ_om,j = 4 n_c g_j²/κ` per phonon, so a
//! thermal Lorentzian carries area `n_th γ_om,j` and a coherent peak carries
//! `n_coh γ_om,j`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::constants::H;
use crate::error::{Error, Result};
use crate::fit::{self, Background, FitResult};
use crate::model::{DeviceParams, PumpState, Sideband};
use crate::trace::{Trace, TraceMeta, XUnit, YUnit};

/// One mechanical resonance.
///
/// `gamma` is the mechanical linewidth without optical backaction (intrinsic
/// plus electromechanical). The thermal and driven synthesizers use it as the
/// observed Lorentzian width; the scattering model adds the optical
/// backaction self-consistently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanicalMode {
    /// Center frequency, Hz.
    pub f: f64,
    /// Linewidth, Hz.
    pub gamma: f64,
    /// Optomechanical coupling magnitude, Hz.
    pub g: f64,
    /// Optomechanical coupling phase, rad, in `[0, 2π)`.
    pub phi: f64,
    /// Decay into the microwave feedline, Hz (`<= gamma`).
    pub gamma_e: f64,
}

impl MechanicalMode {
    pub fn new(f: f64, gamma: f64, g: f64, phi: f64, gamma_e: f64) -> Result<Self> {
        let m = MechanicalMode {
            f,
            gamma,
            g,
            phi: phi.rem_euclid(2.0 * PI),
            gamma_e,
        };
        let errs = m.violations();
        if errs.is_empty() {
            Ok(m)
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// The device's principal mode.
    pub fn principal(dev: &DeviceParams) -> Self {
        MechanicalMode {
            f: dev.f_m(),
            gamma: dev.gamma_mi(),
            g: dev.g_om(),
            phi: 0.0,
            gamma_e: dev.gamma_me(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.f.is_finite() && self.f > 0.0) {
            out.push(format!("mode f_hz must be > 0 (got {})", self.f));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            out.push(format!("mode gamma_hz must be > 0 (got {})", self.gamma));
        }
        if !(self.g.is_finite() && self.g >= 0.0) {
            out.push(format!("mode g_hz must be >= 0 (got {})", self.g));
        }
        if !(self.gamma_e.is_finite() && self.gamma_e >= 0.0) {
            out.push(format!("mode gamma_e_hz must be >= 0 (got {})", self.gamma_e));
        } else if self.gamma_e > self.gamma {
            out.push(format!(
                "mode gamma_e_hz ({}) exceeds gamma_hz ({})",
                self.gamma_e, self.gamma
            ));
        }
        if !self.phi.is_finite() {
            out.push("mode phi_rad must be finite".into());
        }
        out
    }

    /// Mechanical susceptibility `1/(i 2π (f_j - f) + π γ_j)`, in 1/(rad/s).
    pub fn susceptibility(&self, f: f64) -> Complex64 {
        1.0 / Complex64::new(PI * self.gamma, 2.0 * PI * (self.f - f))
    }

    /// Sideband scattering rate per phonon, `4 n_c g²/κ`, Hz.
    pub fn scattering_rate(&self, n_c: f64, kappa_o: f64) -> f64 {
        4.0 * n_c * self.g * self.g / kappa_o
    }

    /// Unit-area Lorentzian of this mode.
    pub fn lineshape(&self, f: f64) -> f64 {
        fit::lorentzian(f, self.f, self.gamma)
    }

    /// Steady-state coherent phonon number under a microwave tone of power
    /// `p_mu` W at `drive_f` Hz: `|b|² = Γ_e Φ/|Γ/2 + iδ|²` with `Φ = p/(h f)`.
    pub fn coherent_phonons(&self, drive_f: f64, p_mu: f64) -> f64 {
        let flux = p_mu / (H * self.f);
        2.0 * PI * self.gamma_e * flux * self.susceptibility(drive_f).norm_sqr()
    }
}

/// Electromechanical decay rate implied by `n_coh` on-resonance phonons under
/// `p_mu` W, inverting [`MechanicalMode::coherent_phonons`].
pub fn gamma_e_from_phonons(n_coh: f64, f_m: f64, gamma: f64, p_mu: f64) -> Result<f64> {
    if !(p_mu > 0.0) {
        return Err(Error::invalid("p_mu", "must be > 0"));
    }
    Ok(n_coh * PI * H * f_m * gamma * gamma / (2.0 * p_mu))
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Empty("frequency grid".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("grid", "must be strictly increasing"));
    }
    Ok(())
}

/// Thermal sideband spectrum: one Lorentzian of area `n_th γ_om,j` per mode.
pub fn thermal_spectrum(
    dev: &DeviceParams,
    modes: &[MechanicalMode],
    n_c: f64,
    n_th: f64,
    grid: &[f64],
) -> Result<Trace> {
    check_grid(grid)?;
    let weights: Vec<f64> = modes
        .iter()
        .map(|m| n_th * m.scattering_rate(n_c, dev.kappa_o()))
        .collect();
    let mut t = Trace::from_fn(grid, XUnit::Hz, YUnit::Linear, |f| {
        modes.iter().zip(&weights).map(|(m, w)| w * m.lineshape(f)).sum()
    })?;
    t.meta = TraceMeta {
        x_label: "frequency".into(),
        y_label: "sideband photon rate density".into(),
        rbw: None,
    };
    Ok(t)
}

/// A microwave tone applied to the piezoelectric port.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherentDrive {
    /// Tone frequency, Hz.
    pub f: f64,
    /// Power at the device, W.
    pub p_mu: f64,
    /// Analyzer resolution bandwidth, Hz.
    pub rbw: f64,
}

/// Instrument-limited peak of unit area and equivalent noise bandwidth `rbw`.
pub fn rbw_peak(f: f64, center: f64, rbw: f64) -> f64 {
    (-PI * ((f - center) / rbw).powi(2)).exp() / rbw
}

/// Thermal spectrum plus, for each mode, a coherent peak at the drive
/// frequency with area `n_coh,j γ_om,j`.
pub fn driven_spectrum(
    dev: &DeviceParams,
    modes: &[MechanicalMode],
    n_c: f64,
    n_th: f64,
    drive: CoherentDrive,
    grid: &[f64],
) -> Result<Trace> {
    if !(drive.rbw > 0.0) {
        return Err(Error::invalid("rbw", "must be > 0"));
    }
    if !(drive.p_mu >= 0.0) {
        return Err(Error::invalid("p_mu", "must be >= 0"));
    }
    let thermal = thermal_spectrum(dev, modes, n_c, n_th, grid)?;
    let coherent_area = coherent_peak_area(dev, modes, n_c, drive);
    let mut t = thermal.map_y(|f, y| y + coherent_area * rbw_peak(f, drive.f, drive.rbw));
    t.meta.rbw = Some(drive.rbw);
    Ok(t)
}

/// Total coherent-peak area `Σ_j n_coh,j γ_om,j`.
pub fn coherent_peak_area(dev: &DeviceParams, modes: &[MechanicalMode], n_c: f64, drive: CoherentDrive) -> f64 {
    modes
        .iter()
        .map(|m| m.coherent_phonons(drive.f, drive.p_mu) * m.scattering_rate(n_c, dev.kappa_o()))
        .sum()
}

/// Outcome of the thermal-peak calibration.
#[derive(Debug, Clone)]
pub struct CoherentCalibration {
    pub n_coh: f64,
    /// Area of the coherent peak above the fitted thermal Lorentzian.
    pub coherent_area: f64,
    /// Frequency of the coherent peak, Hz.
    pub drive_f: f64,
    /// Lorentzian + constant background fit to the thermal part.
    pub thermal_fit: FitResult,
}

fn running_median(y: &[f64], half: usize) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(y.len());
            let mut w = y[lo..hi].to_vec();
            fit::median(&mut w)
        })
        .collect()
}

/// Recovers the coherent phonon number from a spectrum holding one thermal
/// Lorentzian and one instrument-limited drive peak:
/// `n_coh = n_th · A_coh / A_thermal`.
///
/// The resolution bandwidth comes from `spectrum.meta.rbw`, or is estimated
/// from the narrowest feature when absent.
pub fn calibrate_coherent_phonons(spectrum: &Trace, n_th: f64) -> Result<CoherentCalibration> {
    let (x, y) = (spectrum.x(), spectrum.y());
    if x.len() < 16 {
        return Err(Error::FitFailure("spectrum too short to calibrate".into()));
    }
    let dx = (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64;

    // Narrow feature: largest excess over a running median wider than the
    // instrument peak but narrower than the mechanical line.
    let rbw_hint = spectrum.meta.rbw.unwrap_or(4.0 * dx);
    let half = ((6.0 * rbw_hint / dx).ceil() as usize).clamp(3, x.len() / 4);
    let smooth = running_median(y, half);
    let (ipk, _) = y
        .iter()
        .zip(&smooth)
        .map(|(a, b)| a - b)
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty");
    let rbw = match spectrum.meta.rbw {
        Some(r) => r,
        None => {
            let excess: Vec<f64> = y.iter().zip(&smooth).map(|(a, b)| a - b).collect();
            let h = excess[ipk];
            let mut lo = ipk;
            while lo > 0 && excess[lo - 1] > 0.5 * h {
                lo -= 1;
            }
            let mut hi = ipk;
            while hi + 1 < x.len() && excess[hi + 1] > 0.5 * h {
                hi += 1;
            }
            (x[hi] - x[lo]).max(dx)
        }
    };
    let f_pk = x[ipk];
    let guard = 4.0 * rbw;

    let (kx, ky): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(&f, _)| (f - f_pk).abs() > guard)
        .map(|(&f, &v)| (f, v))
        .unzip();
    let masked = Trace::new(kx, ky, spectrum.x_unit, spectrum.y_unit)?;
    let lf = fit::fit_lorentzian_multi(&masked, 1, &Background::Constant)?;
    if !lf.result.converged {
        return Err(Error::FitFailure("thermal Lorentzian fit did not converge".into()));
    }
    let peak = lf.peaks[0];
    if !(peak.fwhm > 3.0 * rbw) {
        return Err(Error::FitFailure(format!(
            "thermal line ({:e} Hz) not resolvable from the drive peak ({rbw:e} Hz)",
            peak.fwhm
        )));
    }
    if !(peak.area > 0.0) {
        return Err(Error::FitFailure("thermal Lorentzian has no area".into()));
    }
    let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if lf.result.residual_norm > 0.2 * scale {
        return Err(Error::FitFailure("thermal fit residual too large".into()));
    }
    let x_mid = 0.5 * (masked.x()[0] + masked.x()[masked.len() - 1]);

    let excess = spectrum
        .window(f_pk - guard, f_pk + guard)
        .map_y(|f, v| v - lf.eval(f, x_mid));
    let coherent_area = excess.integrate();
    Ok(CoherentCalibration {
        n_coh: n_th * coherent_area / peak.area,
        coherent_area,
        drive_f: f_pk,
        thermal_fit: lf.result,
    })
}

/// Complex microwave-to-optical scattering amplitude at drive frequency `f`.
///
/// Solves the linear coupled-mode equations for one optical sideband mode and
/// all mechanical modes, which share the optical cavity and the microwave
/// feedline. The amplitude includes `√η_oc` and the bus coupling `√κ_e`.
pub fn s_oe_at(dev: &DeviceParams, modes: &[MechanicalMode], pump: &PumpState, f: f64) -> Result<Complex64> {
    if modes.is_empty() {
        return Err(Error::Empty("no mechanical modes".into()));
    }
    let n = modes.len();
    let i = Complex64::i();
    let w = 2.0 * PI * f;
    let kappa = 2.0 * PI * dev.kappa_o();
    let kappa_e = 2.0 * PI * dev.kappa_oe();
    let amp = pump.n_c.sqrt();
    // Cavity resonance sits |Δ| above the pump for red, below for blue; in
    // both cases the sideband at drive offset f sees detuning |Δ| - f.
    let cav = Complex64::new(0.5 * kappa, 2.0 * PI * pump.detuning.abs() - w);
    let sideband = pump.sideband();

    let mut m = DMatrix::<Complex64>::zeros(n + 1, n + 1);
    let mut rhs = DVector::<Complex64>::zeros(n + 1);
    m[(0, 0)] = cav;
    for (j, mode) in modes.iter().enumerate() {
        let gj = 2.0 * PI * mode.g * amp;
        let phase = Complex64::from_polar(1.0, mode.phi);
        let (to_cavity, from_cavity) = match sideband {
            // a† b† + h.c.: phase enters conjugated on the cavity row.
            Sideband::Blue => (-i * gj * phase.conj(), i * gj * phase),
            Sideband::Red => (i * gj * phase, i * gj * phase.conj()),
        };
        m[(0, j + 1)] = to_cavity;
        m[(j + 1, 0)] = from_cavity;
        let ge_j = 2.0 * PI * mode.gamma_e;
        m[(j + 1, j + 1)] = Complex64::new(PI * mode.gamma, 2.0 * PI * mode.f - w);
        for (k, other) in modes.iter().enumerate() {
            if k != j {
                let ge_k = 2.0 * PI * other.gamma_e;
                m[(j + 1, k + 1)] = Complex64::new(0.5 * (ge_j * ge_k).sqrt(), 0.0);
            }
        }
        rhs[j + 1] = Complex64::new(ge_j.sqrt(), 0.0);
    }
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("singular coupled-mode system".into()))?;
    Ok(dev.eta_oc().sqrt() * kappa_e.sqrt() * sol[0])
}

/// `|S_oe(f)|` on `grid`.
pub fn s_oe_spectrum(dev: &DeviceParams, modes: &[MechanicalMode], pump: &PumpState, grid: &[f64]) -> Result<Trace> {
    if modes.is_empty() {
        return Err(Error::Empty("no mechanical modes".into()));
    }
    for m in modes {
        let errs = m.violations();
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
    }
    if pump.detuning == 0.0 {
        return Err(Error::invalid("detuning", "pump must be detuned to a sideband"));
    }
    check_grid(grid)?;
    let y = grid
        .iter()
        .map(|&f| s_oe_at(dev, modes, pump, f).map(|s| s.norm()))
        .collect::<Result<Vec<_>>>()?;
    let mut t = Trace::new(grid.to_vec(), y, XUnit::Hz, YUnit::Linear)?;
    t.meta.x_label = "drive frequency".into();
    t.meta.y_label = "|S_oe|".into();
    Ok(t)
}

/// Shifts a trace's frequency axis by `offset` Hz for plot alignment.
pub fn shift_axis(trace: &Trace, offset: f64) -> Trace {
    let x: Vec<f64> = trace.x().iter().map(|f| f + offset).collect();
    let mut t = Trace::new(x, trace.y().to_vec(), trace.x_unit, trace.y_unit)
        .expect("shift preserves ordering");
    t.meta = trace.meta.clone();
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, tests::measured};
    use crate::trace::linspace;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn thermal_area_and_additivity() {
        let d = measured();
        let m = MechanicalMode::principal(&d);
        let grid = linspace(m.f - 50.0 * m.gamma, m.f + 50.0 * m.gamma, 20001);
        let t = thermal_spectrum(&d, &[m], 1e4, 1446.0, &grid).unwrap();
        let expected = 1446.0 * model::backaction_rate(&d, 1e4).unwrap();
        // ±50 linewidths hold all but 2/(100π) of the area.
        assert!(rel(t.integrate(), expected) < 0.01);
        let two = thermal_spectrum(&d, &[m, m], 1e4, 1446.0, &grid).unwrap();
        for (a, b) in t.y().iter().zip(two.y()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn peak_height_matches_quadrature() {
        let d = measured();
        let m = MechanicalMode::principal(&d);
        let n_th = model::thermal_occupation(d.f_m(), 300.0).unwrap();
        let grid = linspace(m.f - 2000.0 * m.gamma, m.f + 2000.0 * m.gamma, 400_001);
        let t = thermal_spectrum(&d, &[m], 1e4, n_th, &grid).unwrap();
        let area = t.integrate();
        let peak = t.y()[200_000];
        assert!(rel(peak, area * 2.0 / (PI * m.gamma)) < 1e-3);
    }

    #[test]
    fn coherent_phonons_on_resonance() {
        let d = measured();
        let m = MechanicalMode::principal(&d);
        let n = m.coherent_phonons(m.f, 6.3e-6);
        assert!(rel(n, 1.1517e6) < 1e-3, "{n}");
        let back = gamma_e_from_phonons(n, m.f, m.gamma, 6.3e-6).unwrap();
        assert!(rel(back, 58.0) < 1e-12);
        let detuned = m.coherent_phonons(m.f + m.gamma / 2.0, 6.3e-6);
        assert!(rel(detuned, n / 2.0) < 1e-12);
    }

    #[test]
    fn zero_drive_is_thermal() {
        let d = measured();
        let m = MechanicalMode::principal(&d);
        let grid = linspace(4.3e9, 4.34e9, 401);
        let a = thermal_spectrum(&d, &[m], 1e4, 1446.0, &grid).unwrap();
        let drive = CoherentDrive { f: m.f, p_mu: 0.0, rbw: 1e5 };
        let b = driven_spectrum(&d, &[m], 1e4, 1446.0, drive, &grid).unwrap();
        assert_eq!(a.y(), b.y());
    }

    #[test]
    fn coherent_area_linear_in_power() {
        let d = measured();
        let m = MechanicalMode::principal(&d);
        let grid = linspace(4.30e9, 4.34e9, 8001);
        let thermal = thermal_spectrum(&d, &[m], 1e4, 1446.0, &grid).unwrap();
        let mut areas = Vec::new();
        for p in [1e-7, 1e-6] {
            let drive = CoherentDrive { f: m.f, p_mu: p, rbw: 1e5 };
            let t = driven_spectrum(&d, &[m], 1e4, 1446.0, drive, &grid).unwrap();
            let coh: Vec<f64> = t.y().iter().zip(thermal.y()).map(|(a, b)| a - b).collect();
            areas.push(Trace::new(grid.clone(), coh, XUnit::Hz, YUnit::Linear).unwrap().integrate());
        }
        assert!(rel(areas[1], 10.0 * areas[0]) < 1e-9);
    }

    #[test]
    fn calibration_round_trip() {
        let d = measured();
        let m = MechanicalMode::principal(&d);
        let grid = linspace(m.f - 40e6, m.f + 40e6, 8001);
        let drive = CoherentDrive { f: m.f + 1e6, p_mu: 6.3e-6, rbw: 1e5 };
        let n_th = 1446.0;
        let t = driven_spectrum(&d, &[m], 1e4, n_th, drive, &grid).unwrap();
        let cal = calibrate_coherent_phonons(&t, n_th).unwrap();
        let truth = m.coherent_phonons(drive.f, drive.p_mu);
        assert!(rel(cal.n_coh, truth) < 0.02, "{} vs {truth}", cal.n_coh);
    }

    #[test]
    fn calibration_without_drive_gives_zero() {
        let d = measured();
        let m = MechanicalMode::principal(&d);
        let grid = linspace(m.f - 40e6, m.f + 40e6, 4001);
        let t = thermal_spectrum(&d, &[m], 1e4, 1446.0, &grid).unwrap();
        let mut t = t;
        t.meta.rbw = Some(1e5);
        let cal = calibrate_coherent_phonons(&t, 1446.0).unwrap();
        assert!(cal.n_coh.abs() < 1e-3 * 1446.0, "{}", cal.n_coh);
    }

    fn pump_for(d: &DeviceParams, sideband: Sideband, n_c: f64) -> PumpState {
        let det = match sideband {
            Sideband::Blue => d.f_m(),
            Sideband::Red => -d.f_m(),
        };
        PumpState::from_photon_number(det, n_c).unwrap()
    }

    #[test]
    fn single_mode_matches_efficiency_chain() {
        let d = measured();
        let m = MechanicalMode::principal(&d);
        for s in [Sideband::Blue, Sideband::Red] {
            let pump = pump_for(&d, s, 1e4);
            let s_oe = s_oe_at(&d, &[m], &pump, d.f_m()).unwrap().norm_sqr();
            let eta = model::total_efficiency(&d, &pump, s).unwrap();
            assert!(rel(s_oe, eta) < 1e-6, "{s}: {s_oe} vs {eta}");
        }
    }

    #[test]
    fn opposite_phases_cancel() {
        let d = measured();
        let a = MechanicalMode::new(4.32e9, 8.4e6, 130e3, 0.0, 58.0).unwrap();
        let b = MechanicalMode { phi: PI, ..a };
        let pump = pump_for(&d, Sideband::Blue, 1e4);
        let s = s_oe_at(&d, &[a, b], &pump, 4.32e9).unwrap();
        assert!(s.norm() < 1e-12 * s_oe_at(&d, &[a], &pump, 4.32e9).unwrap().norm());
    }

    #[test]
    fn overlapping_opposed_modes_dig_a_dip() {
        let d = measured();
        let pump = pump_for(&d, Sideband::Blue, 1e4);
        let a = MechanicalMode::new(4.319e9, 8.4e6, 130e3, 0.0, 58.0).unwrap();
        let b = MechanicalMode::new(4.321e9, 8.4e6, 130e3, PI, 58.0).unwrap();
        let mid = 4.32e9;
        let s = |modes: &[MechanicalMode], f| s_oe_at(&d, modes, &pump, f).unwrap().norm();
        let both = s(&[a, b], mid);
        assert!(both < 0.5 * s(&[a], mid).min(s(&[b], mid)));
        let in_phase = MechanicalMode { phi: 0.0, ..b };
        assert!(s(&[a, in_phase], mid) > s(&[a], mid));
    }

    #[test]
    fn separated_in_phase_modes_antiresonate() {
        // Far from both lines the two responses carry opposite signs, so
        // equal-phase modes cancel between their peaks.
        let d = measured();
        let pump = pump_for(&d, Sideband::Blue, 1e4);
        let a = MechanicalMode::new(4.30e9, 8.4e6, 130e3, 0.0, 58.0).unwrap();
        let b = MechanicalMode::new(4.34e9, 8.4e6, 130e3, 0.0, 58.0).unwrap();
        let s = |modes: &[MechanicalMode], f| s_oe_at(&d, modes, &pump, f).unwrap().norm();
        let mid = 4.32e9;
        assert!(s(&[a, b], mid) < 0.5 * s(&[a], mid));
        let opposed = MechanicalMode { phi: PI, ..b };
        assert!(s(&[a, opposed], mid) > s(&[a], mid));
    }

    #[test]
    fn empty_modes_rejected() {
        let d = measured();
        let pump = pump_for(&d, Sideband::Blue, 1e4);
        assert!(matches!(s_oe_spectrum(&d, &[], &pump, &[4.32e9]), Err(Error::Empty(_))));
    }

    fn arb_modes() -> impl Strategy<Value = Vec<MechanicalMode>> {
        prop::collection::vec(
            (4.2e9..4.45e9f64, 1e6..2e7f64, 1e4..3e5f64, 0.0..(2.0 * PI), 0.0..1.0f64),
            1..5,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(f, gamma, g, phi, frac)| MechanicalMode::new(f, gamma, g, phi, frac * gamma).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn global_phase_invariance(modes in arb_modes(), shift in 0.0..(2.0 * PI), f in 4.2e9..4.45e9f64, blue in any::<bool>()) {
            let d = measured();
            let s = if blue { Sideband::Blue } else { Sideband::Red };
            let pump = pump_for(&d, s, 1e3);
            let shifted: Vec<MechanicalMode> = modes.iter().map(|m| MechanicalMode { phi: (m.phi + shift).rem_euclid(2.0 * PI), ..*m }).collect();
            let a = s_oe_at(&d, &modes, &pump, f).unwrap().norm();
            let b = s_oe_at(&d, &shifted, &pump, f).unwrap().norm();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-300));
        }

        #[test]
        fn red_conversion_is_passive(modes in arb_modes(), f in 4.1e9..4.55e9f64, n_c in 0.0..1e6f64) {
            let d = measured();
            let pump = pump_for(&d, Sideband::Red, n_c);
            let s2 = s_oe_at(&d, &modes, &pump, f).unwrap().norm_sqr();
            let bound = d.eta_oc() * d.kappa_oe() / d.kappa_o();
            prop_assert!(s2 <= bound * (1.0 + 1e-9), "{} > {}", s2, bound);
        }

        #[test]
        fn thermal_additivity(a in arb_modes(), b in arb_modes()) {
            let d = measured();
            let grid = linspace(4.2e9, 4.45e9, 101);
            let ta = thermal_spectrum(&d, &a, 1e4, 100.0, &grid).unwrap();
            let tb = thermal_spectrum(&d, &b, 1e4, 100.0, &grid).unwrap();
            let all: Vec<MechanicalMode> = a.iter().chain(&b).copied().collect();
            let tab = thermal_spectrum(&d, &all, 1e4, 100.0, &grid).unwrap();
            for ((x, y), z) in ta.y().iter().zip(tb.y()).zip(tab.y()) {
                prop_assert!((x + y - z).abs() <= 1e-12 * z.abs().max(1e-300));
            }
        }
    }
}
