//! Qubit-to-mechanics swap estimates.
//!
//! A transmon is treated as a linear microwave resonator restricted to one
//! excitation, resonant with the mechanical mode. Its impedance boosts the
//! piezoelectric coupling: `g_em = ½ √(γ_me f_m) √(Z_q/Z_0)`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::DeviceParams;
use crate::trace::{Trace, XUnit, YUnit};

/// Microwave resonator (qubit) parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitConfig {
    /// Qubit capacitance, F.
    pub c_q: f64,
    /// Resonance frequency, Hz.
    pub f_mu: f64,
    /// Linewidth, Hz.
    pub kappa_mu: f64,
}

impl QubitConfig {
    pub fn new(c_q: f64, f_mu: f64, kappa_mu: f64) -> Result<Self> {
        let q = QubitConfig { c_q, f_mu, kappa_mu };
        let errs = q.violations();
        if errs.is_empty() {
            Ok(q)
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// 70 fF transmon with a 1.2 MHz linewidth, resonant with `dev`.
    pub fn transmon_for(dev: &DeviceParams) -> Self {
        QubitConfig {
            c_q: 70e-15,
            f_mu: dev.f_m(),
            kappa_mu: 1.2e6,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (key, v) in [("c_q_f", self.c_q), ("f_mu_hz", self.f_mu), ("kappa_mu_hz", self.kappa_mu)] {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{key} must be > 0 (got {v})"));
            }
        }
        out
    }
}

/// Resonator impedance `Z_q = 1/(2π f_μ (C_IDT + C_q))`, Ω.
pub fn qubit_impedance(q: &QubitConfig, dev: &DeviceParams) -> f64 {
    1.0 / (2.0 * PI * q.f_mu * (dev.c_idt() + q.c_q))
}

/// Electromechanical coupling rate, Hz.
pub fn coupling_g_em(dev: &DeviceParams, q: &QubitConfig) -> f64 {
    0.5 * (dev.gamma_me() * dev.f_m()).sqrt() * (qubit_impedance(q, dev) / dev.z0()).sqrt()
}

/// Electromechanical cooperativity `4 g²/(γ κ_μ)`.
pub fn em_cooperativity(g_em: f64, gamma_m: f64, kappa_mu: f64) -> Result<f64> {
    if !(gamma_m > 0.0) {
        return Err(Error::invalid("gamma_m", "must be > 0"));
    }
    if !(kappa_mu > 0.0) {
        return Err(Error::invalid("kappa_mu", "must be > 0"));
    }
    Ok(4.0 * g_em * g_em / (gamma_m * kappa_mu))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwapReport {
    pub z_q: f64,
    pub g_em: f64,
    /// Largest intrinsic mechanical linewidth that still allows a swap, `4 g_em`.
    pub threshold_gamma: f64,
    pub feasible: bool,
    /// Cooperativity against the intrinsic mechanical linewidth.
    pub c_em: f64,
}

/// Swap condition `γ_m,i < 4 g_em` and the electromechanical cooperativity.
pub fn swap_feasibility(dev: &DeviceParams, q: &QubitConfig) -> Result<SwapReport> {
    let z_q = qubit_impedance(q, dev);
    let g_em = coupling_g_em(dev, q);
    let threshold_gamma = 4.0 * g_em;
    Ok(SwapReport {
        z_q,
        g_em,
        threshold_gamma,
        feasible: dev.gamma_mi() < threshold_gamma,
        c_em: em_cooperativity(g_em, dev.gamma_mi(), q.kappa_mu)?,
    })
}

/// Populations of a qubit-mechanics exchange.
#[derive(Debug, Clone)]
pub struct RabiRun {
    /// Qubit excitation probability against time.
    pub qubit: Trace,
    /// Mechanical occupation against time.
    pub phonon: Trace,
    /// Time of the first phonon maximum on the grid, s.
    pub first_swap_time: Option<f64>,
    /// Phonon occupation at that maximum.
    pub first_swap_transfer: Option<f64>,
}

/// Exchange for the device and qubit, with mechanical loss `γ_m,i` and
/// qubit loss `κ_μ`.
pub fn rabi_swap_sim(dev: &DeviceParams, q: &QubitConfig, t_grid: &[f64]) -> Result<RabiRun> {
    rabi_swap(coupling_g_em(dev, q), dev.gamma_mi(), q.kappa_mu, t_grid)
}

/// Integrates `ċ_q = −π κ c_q − i 2π g c_m`, `ċ_m = −π γ c_m − i 2π g c_q`
/// from `c_q(0) = 1`, `c_m(0) = 0`, sampling on `t_grid`.
pub fn rabi_swap(g: f64, gamma_m: f64, kappa_mu: f64, t_grid: &[f64]) -> Result<RabiRun> {
    if !(g.is_finite() && g >= 0.0) {
        return Err(Error::invalid("g_em", "must be >= 0"));
    }
    if !(gamma_m.is_finite() && gamma_m >= 0.0 && kappa_mu.is_finite() && kappa_mu >= 0.0) {
        return Err(Error::invalid("decay", "rates must be >= 0"));
    }
    if t_grid.is_empty() {
        return Err(Error::Empty("time grid".into()));
    }
    if t_grid[0] < 0.0 || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("t_grid", "must start at t >= 0 and increase"));
    }
    if g > 0.0 {
        let max_dt = t_grid.windows(2).map(|w| w[1] - w[0]).fold(t_grid[0], f64::max);
        let limit = 1.0 / (20.0 * g);
        if max_dt > limit {
            return Err(Error::Sampling(format!(
                "time step {max_dt:e} s exceeds {limit:e} s (20 samples per 1/g_em)"
            )));
        }
    }

    let i = Complex64::i();
    let (a, b, w) = (PI * kappa_mu, PI * gamma_m, 2.0 * PI * g);
    let deriv = |c: [Complex64; 2]| [-a * c[0] - i * w * c[1], -b * c[1] - i * w * c[0]];
    // RK4 substeps keep |λ| h well inside the stability region.
    let rate = a.max(b).max(w);
    let mut c = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
    let mut t = 0.0;
    let mut qubit = Vec::with_capacity(t_grid.len());
    let mut phonon = Vec::with_capacity(t_grid.len());
    for &target in t_grid {
        let span = target - t;
        if span > 0.0 {
            let n = ((span * rate / 0.02).ceil() as usize).max(1);
            let h = span / n as f64;
            for _ in 0..n {
                let k1 = deriv(c);
                let k2 = deriv([c[0] + 0.5 * h * k1[0], c[1] + 0.5 * h * k1[1]]);
                let k3 = deriv([c[0] + 0.5 * h * k2[0], c[1] + 0.5 * h * k2[1]]);
                let k4 = deriv([c[0] + h * k3[0], c[1] + h * k3[1]]);
                for k in 0..2 {
                    c[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
                }
            }
            t = target;
        }
        qubit.push(c[0].norm_sqr());
        phonon.push(c[1].norm_sqr());
    }

    let first = phonon
        .windows(3)
        .position(|w| w[1] > 0.0 && w[1] >= w[0] && w[1] > w[2])
        .map(|k| k + 1);
    let mut qt = Trace::new(t_grid.to_vec(), qubit, XUnit::Seconds, YUnit::Linear)?;
    qt.meta.y_label = "qubit excitation".into();
    let mut pt = Trace::new(t_grid.to_vec(), phonon, XUnit::Seconds, YUnit::Linear)?;
    pt.meta.y_label = "phonon occupation".into();
    Ok(RabiRun {
        first_swap_time: first.map(|k| t_grid[k]),
        first_swap_transfer: first.map(|k| pt.y()[k]),
        qubit: qt,
        phonon: pt,
    })
}
