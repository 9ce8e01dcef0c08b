//! Device records and the closed-form efficiency chain.
//!
//! Every rate is an ordinary frequency in Hz. The cooperativity
//! `C = 4 n_c g² / (κ γ)` is a ratio of rates, so it is the same whether the
//! rates are angular or not; likewise for the backaction rate `4 n_c g² / κ`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::constants::{H, K_B};
use crate::error::{Error, Result};

/// Which motional sideband the pump addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sideband {
    /// Pump above the cavity (`Δ > 0`): parametric amplification, the
    /// mechanical linewidth narrows.
    Blue,
    /// Pump below the cavity (`Δ < 0`): beam-splitter conversion, the
    /// mechanical linewidth broadens.
    Red,
}

impl Sideband {
    /// Sideband addressed by a signed detuning. Zero detuning maps to red,
    /// where the linewidth correction is stable.
    pub fn from_detuning(detuning: f64) -> Self {
        if detuning > 0.0 {
            Sideband::Blue
        } else {
            Sideband::Red
        }
    }

    /// `-1` for blue, `+1` for red: the sign applied to the backaction rate.
    pub fn damping_sign(self) -> f64 {
        match self {
            Sideband::Blue => -1.0,
            Sideband::Red => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sideband::Blue => "blue",
            Sideband::Red => "red",
        }
    }
}

impl fmt::Display for Sideband {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sideband {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blue" => Ok(Sideband::Blue),
            "red" => Ok(Sideband::Red),
            other => Err(Error::Parse(format!(
                "unknown sideband `{other}` (expected `blue` or `red`)"
            ))),
        }
    }
}

/// Unvalidated device numbers. Build a [`DeviceParams`] from it with
/// [`DeviceParams::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceValues {
    /// Optical resonance frequency, Hz.
    pub f_o: f64,
    /// Total optical linewidth, Hz.
    pub kappa_o: f64,
    /// Extrinsic (bus-waveguide) optical linewidth, Hz.
    pub kappa_oe: f64,
    /// Principal mechanical frequency, Hz.
    pub f_m: f64,
    /// Intrinsic mechanical linewidth, Hz.
    pub gamma_mi: f64,
    /// Mechanical decay into the microwave feedline, Hz.
    pub gamma_me: f64,
    /// Vacuum optomechanical coupling, Hz.
    pub g_om: f64,
    /// Grating/fiber coupling efficiency.
    pub eta_oc: f64,
    /// Interdigitated capacitor capacitance, F.
    pub c_idt: f64,
    /// Feedline characteristic impedance, Ω.
    pub z0: f64,
}

/// A validated lumped transducer record.
///
/// Frequencies and linewidths are strictly positive, couplings non-negative,
/// `kappa_oe <= kappa_o` and `0 <= eta_oc <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceParams {
    v: DeviceValues,
}

impl DeviceParams {
    /// Validates `values`, reporting every violation at once.
    pub fn new(values: DeviceValues) -> Result<Self> {
        let errors = values.violations();
        if errors.is_empty() {
            Ok(DeviceParams { v: values })
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn values(&self) -> DeviceValues {
        self.v
    }

    /// Copy with some values replaced, re-validated.
    pub fn with(&self, edit: impl FnOnce(&mut DeviceValues)) -> Result<Self> {
        let mut v = self.v;
        edit(&mut v);
        DeviceParams::new(v)
    }

    pub fn f_o(&self) -> f64 {
        self.v.f_o
    }
    pub fn kappa_o(&self) -> f64 {
        self.v.kappa_o
    }
    pub fn kappa_oe(&self) -> f64 {
        self.v.kappa_oe
    }
    /// Intrinsic optical linewidth `kappa_o - kappa_oe`.
    pub fn kappa_oi(&self) -> f64 {
        self.v.kappa_o - self.v.kappa_oe
    }
    pub fn f_m(&self) -> f64 {
        self.v.f_m
    }
    pub fn gamma_mi(&self) -> f64 {
        self.v.gamma_mi
    }
    pub fn gamma_me(&self) -> f64 {
        self.v.gamma_me
    }
    pub fn g_om(&self) -> f64 {
        self.v.g_om
    }
    pub fn eta_oc(&self) -> f64 {
        self.v.eta_oc
    }
    pub fn c_idt(&self) -> f64 {
        self.v.c_idt
    }
    pub fn z0(&self) -> f64 {
        self.v.z0
    }

    /// Intrinsic optical quality factor `f_o / kappa_oi`.
    pub fn q_oi(&self) -> f64 {
        self.v.f_o / self.kappa_oi()
    }
}

impl DeviceValues {
    /// Human-readable list of invariant violations, named by file key.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut positive = |name: &str, x: f64| {
            if !(x.is_finite() && x > 0.0) {
                out.push(format!("{name} must be finite and > 0 (got {x})"));
            }
        };
        positive("f_o_hz", self.f_o);
        positive("kappa_o_hz", self.kappa_o);
        positive("kappa_oe_hz", self.kappa_oe);
        positive("f_m_hz", self.f_m);
        positive("gamma_mi_hz", self.gamma_mi);
        positive("z0_ohm", self.z0);
        let mut non_negative = |name: &str, x: f64| {
            if !(x.is_finite() && x >= 0.0) {
                out.push(format!("{name} must be finite and >= 0 (got {x})"));
            }
        };
        non_negative("gamma_me_hz", self.gamma_me);
        non_negative("g_om_hz", self.g_om);
        non_negative("c_idt_f", self.c_idt);
        if !(0.0..=1.0).contains(&self.eta_oc) {
            out.push(format!("eta_oc must lie in [0, 1] (got {})", self.eta_oc));
        }
        if self.kappa_oe > self.kappa_o {
            out.push(format!(
                "kappa_oe_hz ({}) exceeds kappa_o_hz ({})",
                self.kappa_oe, self.kappa_o
            ));
        }
        out
    }
}

/// Relative tolerance within which a supplied photon number must agree with
/// the one implied by the supplied power.
pub const PUMP_CONSISTENCY_TOL: f64 = 0.05;

/// Optical drive condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpState {
    /// Laser minus cavity frequency, Hz. Positive is blue.
    pub detuning: f64,
    /// On-chip optical power, W, when known.
    pub p_on_chip: Option<f64>,
    /// Intracavity photon number.
    pub n_c: f64,
}

impl PumpState {
    /// Pump specified by power; the photon number is derived.
    pub fn from_power(dev: &DeviceParams, detuning: f64, p_on_chip: f64) -> Result<Self> {
        let n_c = photon_number(dev, detuning, p_on_chip)?;
        Ok(PumpState {
            detuning,
            p_on_chip: Some(p_on_chip),
            n_c,
        })
    }

    /// Pump specified directly by intracavity photon number.
    pub fn from_photon_number(detuning: f64, n_c: f64) -> Result<Self> {
        if !(n_c.is_finite() && n_c >= 0.0) {
            return Err(Error::invalid("n_c", format!("must be >= 0 (got {n_c})")));
        }
        if !detuning.is_finite() {
            return Err(Error::invalid("detuning", "must be finite"));
        }
        Ok(PumpState {
            detuning,
            p_on_chip: None,
            n_c,
        })
    }

    /// Pump with both power and photon number given; they must agree within
    /// [`PUMP_CONSISTENCY_TOL`].
    pub fn with_both(dev: &DeviceParams, detuning: f64, p_on_chip: f64, n_c: f64) -> Result<Self> {
        let derived = photon_number(dev, detuning, p_on_chip)?;
        let scale = derived.abs().max(n_c.abs());
        if scale > 0.0 && (derived - n_c).abs() > PUMP_CONSISTENCY_TOL * scale {
            return Err(Error::invalid(
                "n_c",
                format!("supplied {n_c:e} disagrees with {derived:e} implied by the pump power"),
            ));
        }
        Ok(PumpState {
            detuning,
            p_on_chip: Some(p_on_chip),
            n_c,
        })
    }

    pub fn sideband(&self) -> Sideband {
        Sideband::from_detuning(self.detuning)
    }
}

/// Intracavity photon number of a side-coupled cavity:
/// `n_c = P/(h f_o) · 2π κ_e / ((2π Δ)² + (π κ)²)`.
pub fn photon_number(dev: &DeviceParams, detuning: f64, p_on_chip: f64) -> Result<f64> {
    if !(p_on_chip.is_finite() && p_on_chip >= 0.0) {
        return Err(Error::invalid(
            "p_on_chip",
            format!("must be finite and >= 0 (got {p_on_chip})"),
        ));
    }
    if !detuning.is_finite() {
        return Err(Error::invalid("detuning", "must be finite"));
    }
    let flux = p_on_chip / (H * dev.f_o());
    let denom = (2.0 * PI * detuning).powi(2) + (PI * dev.kappa_o()).powi(2);
    Ok(flux * 2.0 * PI * dev.kappa_oe() / denom)
}

/// Optomechanical cooperativity `4 n_c g² / (κ γ)` against mechanical
/// linewidth `gamma_m`.
pub fn cooperativity(dev: &DeviceParams, n_c: f64, gamma_m: f64) -> Result<f64> {
    if !(gamma_m.is_finite() && gamma_m > 0.0) {
        return Err(Error::invalid("gamma_m", format!("must be > 0 (got {gamma_m})")));
    }
    check_photons(n_c)?;
    Ok(4.0 * n_c * dev.g_om().powi(2) / (dev.kappa_o() * gamma_m))
}

/// Optical backaction rate `4 n_c g² / κ`, Hz.
pub fn backaction_rate(dev: &DeviceParams, n_c: f64) -> Result<f64> {
    check_photons(n_c)?;
    Ok(4.0 * n_c * dev.g_om().powi(2) / dev.kappa_o())
}

/// Mechanical linewidth under optical backaction: `γ_i - γ_om` (blue) or
/// `γ_i + γ_om` (red).
pub fn total_mech_linewidth(dev: &DeviceParams, n_c: f64, sideband: Sideband) -> Result<f64> {
    let gamma_om = backaction_rate(dev, n_c)?;
    if sideband == Sideband::Blue && gamma_om >= dev.gamma_mi() {
        return Err(Error::Instability(format!(
            "backaction {gamma_om:e} Hz reaches the intrinsic linewidth {:e} Hz (parametric oscillation)",
            dev.gamma_mi()
        )));
    }
    Ok(dev.gamma_mi() + sideband.damping_sign() * gamma_om)
}

/// Bus-to-cavity efficiency `κ_e/κ` and electromechanical efficiency `γ_e/γ_m`.
pub fn efficiencies(dev: &DeviceParams, gamma_m: f64) -> Result<(f64, f64)> {
    if !(gamma_m.is_finite() && gamma_m > 0.0) {
        return Err(Error::invalid("gamma_m", format!("must be > 0 (got {gamma_m})")));
    }
    if dev.gamma_me() > gamma_m {
        return Err(Error::invalid(
            "gamma_m",
            format!(
                "electromechanical decay {:e} Hz exceeds the total linewidth {gamma_m:e} Hz",
                dev.gamma_me()
            ),
        ));
    }
    Ok((dev.kappa_oe() / dev.kappa_o(), dev.gamma_me() / gamma_m))
}

/// `4C/(1 ∓ C)²`, the cooperativity gain of the conversion chain.
pub fn cooperativity_gain(c_om: f64, sideband: Sideband) -> Result<f64> {
    let denom = match sideband {
        Sideband::Blue => {
            if c_om >= 1.0 {
                return Err(Error::Instability(format!(
                    "blue-detuned cooperativity {c_om} >= 1"
                )));
            }
            1.0 - c_om
        }
        Sideband::Red => 1.0 + c_om,
    };
    Ok(4.0 * c_om / (denom * denom))
}

/// Every factor of the microwave-to-optical conversion chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyChain {
    pub sideband: Sideband,
    pub n_c: f64,
    pub eta_oc: f64,
    pub eta_o: f64,
    pub eta_em: f64,
    pub c_om: f64,
    /// `4C/(1 ∓ C)²`.
    pub gain: f64,
    pub eta_tot: f64,
    /// Backaction rate, Hz.
    pub gamma_om: f64,
    /// Backaction-modified mechanical linewidth, Hz.
    pub gamma_tot: f64,
}

/// Full conversion chain `η_oc · η_o · η_em · 4C/(1 ∓ C)²`.
///
/// `C` and `η_em` are referenced to the backaction-free linewidth `γ_m,i`;
/// the `(1 ∓ C)²` denominator already carries the optical damping or
/// anti-damping, and the backaction-modified linewidth is reported alongside.
pub fn efficiency_chain(dev: &DeviceParams, pump: &PumpState, sideband: Sideband) -> Result<EfficiencyChain> {
    let n_c = pump.n_c;
    let c_om = cooperativity(dev, n_c, dev.gamma_mi())?;
    let gain = cooperativity_gain(c_om, sideband)?;
    let (eta_o, eta_em) = efficiencies(dev, dev.gamma_mi())?;
    let gamma_om = backaction_rate(dev, n_c)?;
    let gamma_tot = total_mech_linewidth(dev, n_c, sideband)?;
    Ok(EfficiencyChain {
        sideband,
        n_c,
        eta_oc: dev.eta_oc(),
        eta_o,
        eta_em,
        c_om,
        gain,
        eta_tot: dev.eta_oc() * eta_o * eta_em * gain,
        gamma_om,
        gamma_tot,
    })
}

/// Total microwave-to-optical conversion efficiency.
pub fn total_efficiency(dev: &DeviceParams, pump: &PumpState, sideband: Sideband) -> Result<f64> {
    efficiency_chain(dev, pump, sideband).map(|c| c.eta_tot)
}

/// Bose-Einstein occupation of a mode at `f_m` Hz and temperature `t` K.
pub fn thermal_occupation(f_m: f64, t: f64) -> Result<f64> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::invalid("temperature", format!("must be > 0 (got {t})")));
    }
    if !(f_m > 0.0) {
        return Err(Error::invalid("f_m", format!("must be > 0 (got {f_m})")));
    }
    let x = H * f_m / (K_B * t);
    Ok(1.0 / x.exp_m1())
}

fn check_photons(n_c: f64) -> Result<()> {
    if n_c.is_finite() && n_c >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("n_c", format!("must be finite and >= 0 (got {n_c})")))
    }
}
