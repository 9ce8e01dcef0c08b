//! Parameter extraction from traces.
//!
//! Each fitter maps its trace into normalised coordinates, seeds the
//! parameters deterministically from extrema and half-maximum crossings, and
//! refines them with [`crate::lsq`].

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lsq::{self, Options, Problem};
use crate::model::Sideband;
use crate::trace::Trace;

/// One fitted quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
    pub unit: &'static str,
}

/// Estimates with standard errors and goodness of fit. When `converged` is
/// false the estimates are best effort.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Vec<FitParam>,
    /// Root-mean-square residual in the units of the fitted data.
    pub residual_norm: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.std_error)
    }

    /// Value of `name`, panicking if the fitter did not produce it.
    pub fn value(&self, name: &str) -> f64 {
        self.get(name)
            .unwrap_or_else(|| panic!("fit result has no parameter `{name}`"))
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, value: f64, std_error: f64, unit: &'static str) {
        self.params.push(FitParam {
            name: name.into(),
            value,
            std_error: if std_error.is_nan() { f64::INFINITY } else { std_error.abs() },
            unit,
        });
    }

    pub(crate) fn new(residual_norm: f64, converged: bool) -> Self {
        FitResult {
            params: Vec::new(),
            residual_norm,
            converged,
            warnings: Vec::new(),
        }
    }
}

/// Key-value text, one `name = value +/- error unit` per line.
impl fmt::Display for FitResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(f, "{} = {:.9e} +/- {:.3e} {}", p.name, p.value, p.std_error, p.unit)?;
        }
        writeln!(f, "residual_norm = {:.6e}", self.residual_norm)?;
        writeln!(f, "converged = {}", self.converged)?;
        for w in &self.warnings {
            writeln!(f, "warning = {w}")?;
        }
        Ok(())
    }
}

/// Robust noise estimate from first differences (`MAD / 0.6745 / √2`).
pub(crate) fn noise_sigma(y: &[f64]) -> f64 {
    if y.len() < 3 {
        return 0.0;
    }
    let mut d: Vec<f64> = y.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    d.sort_by(|a, b| a.total_cmp(b));
    d[d.len() / 2] / 0.6745 / std::f64::consts::SQRT_2
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn edge_median(y: &[f64], left: bool) -> f64 {
    let k = (y.len() / 20).max(1).min(y.len());
    let mut s: Vec<f64> = if left { y[..k].to_vec() } else { y[y.len() - k..].to_vec() };
    median(&mut s)
}

/// Width between the half-level crossings around `idx`, walking outwards
/// while `y` stays beyond `level` (towards the extremum side given by `above`).
fn half_width(x: &[f64], y: &[f64], idx: usize, level: f64, above: bool) -> f64 {
    let beyond = |v: f64| if above { v > level } else { v < level };
    let mut lo = idx;
    while lo > 0 && beyond(y[lo - 1]) {
        lo -= 1;
    }
    let mut hi = idx;
    while hi + 1 < y.len() && beyond(y[hi + 1]) {
        hi += 1;
    }
    let interp = |a: usize, b: usize| {
        let (ya, yb) = (y[a], y[b]);
        if (yb - ya).abs() < f64::MIN_POSITIVE {
            x[a]
        } else {
            x[a] + (level - ya) * (x[b] - x[a]) / (yb - ya)
        }
    };
    let left = if lo > 0 { interp(lo - 1, lo) } else { x[0] };
    let right = if hi + 1 < y.len() { interp(hi, hi + 1) } else { x[x.len() - 1] };
    (right - left).max(x.get(1).map_or(0.0, |x1| x1 - x[0]))
}

// ---------------------------------------------------------------------------
// Optical reflection dip

/// Coupling regime of a reflection dip. Depth alone cannot tell them apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingBranch {
    /// `kappa_oe < kappa_o / 2`.
    Under,
    /// `kappa_oe > kappa_o / 2`.
    Over,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchSolution {
    pub kappa_oe: f64,
    pub kappa_oi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DipFit {
    /// `f_o`, `kappa_o`, `kappa_oe` (selected branch), `kappa_oi`, `scale`.
    pub result: FitResult,
    pub under: BranchSolution,
    pub over: BranchSolution,
}

/// Normalised reflection `|1 - κ_e/(i(f - f_o) + κ/2)|²` of a side-coupled cavity.
pub fn reflection(f: f64, f_o: f64, kappa_o: f64, kappa_oe: f64) -> f64 {
    let d = f - f_o;
    let h = 0.5 * kappa_o;
    ((h - kappa_oe).powi(2) + d * d) / (h * h + d * d)
}

/// `R = s (1 - (1 - q²) h² / (h² + v²))` with `h = k/2`, `v = u - c`, in
/// coordinates `u = (f - x0)/xs`.
struct DipProblem<'a> {
    u: Vec<f64>,
    y: &'a [f64],
}

impl DipProblem<'_> {
    fn eval(p: &[f64], u: f64) -> (f64, [f64; 4]) {
        let (c, k, q, s) = (p[0], p[1], p[2], p[3]);
        let h = 0.5 * k;
        let v = u - c;
        let den = h * h + v * v;
        let l = h * h / den;
        let a = 1.0 - q * q;
        let val = s * (1.0 - a * l);
        let d_c = -s * a * 2.0 * h * h * v / (den * den);
        let d_k = -s * a * h * v * v / (den * den);
        let d_q = s * 2.0 * q * l;
        let d_s = 1.0 - a * l;
        (val, [d_c, d_k, d_q, d_s])
    }
}

impl Problem for DipProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.u.len()
    }
    fn n_params(&self) -> usize {
        4
    }
    fn residuals(&self, p: &[f64], r: &mut [f64]) {
        for (i, (&u, &y)) in self.u.iter().zip(self.y).enumerate() {
            r[i] = Self::eval(p, u).0 - y;
        }
    }
    fn jacobian(&self, p: &[f64], j: &mut DMatrix<f64>) {
        for (i, &u) in self.u.iter().enumerate() {
            let (_, g) = Self::eval(p, u);
            for k in 0..4 {
                j[(i, k)] = g[k];
            }
        }
    }
    fn admissible(&self, p: &[f64]) -> bool {
        p[1] > 0.0 && p[3] > 0.0
    }
}

/// Fits a normalised reflection dip, returning both coupling branches and
/// reporting `branch` as the primary `kappa_oe`.
pub fn fit_optical_dip(trace: &Trace, branch: CouplingBranch) -> Result<DipFit> {
    let (x, y) = (trace.x(), trace.y());
    if x.len() < 8 {
        return Err(Error::FitFailure("no dip found: fewer than 8 samples".into()));
    }
    let base = 0.5 * (edge_median(y, true) + edge_median(y, false));
    let (imin, &ymin) = y
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let noise = noise_sigma(y);
    let depth = base - ymin;
    if !(base > 0.0) || depth <= 5.0 * noise.max(1e-3 * base) {
        return Err(Error::FitFailure("no dip found".into()));
    }
    let width = half_width(x, y, imin, base - 0.5 * depth, false);
    let x0 = x[imin];
    let xs = width;
    let u: Vec<f64> = x.iter().map(|&f| (f - x0) / xs).collect();
    let problem = DipProblem { u, y };
    let q0 = (ymin.max(0.0) / base).sqrt().min(0.99);

    // Start from a shallow and a deep dip; the model is even in q, so these
    // bracket the under- and over-coupled readings of the same depth.
    let mut best: Option<lsq::Solution> = None;
    for q_init in [q0, -q0, 0.5 * (q0 + 1.0)] {
        let sol = lsq::solve(&problem, &[0.0, 1.0, q_init, base], Options::default())?;
        if best.as_ref().is_none_or(|b| sol.ssr < b.ssr) {
            best = Some(sol);
        }
    }
    let sol = best.expect("at least one start");
    let se = sol.std_errors();
    let f_o = x0 + sol.params[0] * xs;
    let kappa_o = sol.params[1] * xs;
    let q = sol.params[2].abs();
    let half = 0.5 * kappa_o;
    let under = BranchSolution {
        kappa_oe: half * (1.0 - q),
        kappa_oi: half * (1.0 + q),
    };
    let over = BranchSolution {
        kappa_oe: half * (1.0 + q),
        kappa_oi: half * (1.0 - q),
    };
    let chosen = match branch {
        CouplingBranch::Under => under,
        CouplingBranch::Over => over,
    };
    let se_q = half * se[2] + 0.5 * (1.0 - q) * se[1] * xs;
    let mut result = FitResult::new(sol.rms(x.len()), sol.converged);
    result.push("f_o", f_o, se[0] * xs, "Hz");
    result.push("kappa_o", kappa_o, se[1] * xs, "Hz");
    result.push("kappa_oe", chosen.kappa_oe, se_q, "Hz");
    result.push("kappa_oi", chosen.kappa_oi, se_q, "Hz");
    result.push("scale", sol.params[3], se[3], "");
    if sol.singular {
        result.warnings.push("normal matrix singular; errors unreliable".into());
    }
    Ok(DipFit { result, under, over })
}

// ---------------------------------------------------------------------------
// Sideband phase response

/// Phase of the reflected sideband at offset `f` from a pump detuned by
/// `detuning`, referenced to the reflected pump:
/// `arg r(Δ + f) - arg r(Δ)` with `r(δ) = 1 - κ_e/(κ/2 + iδ)`.
pub fn sideband_phase(f: f64, detuning: f64, kappa_o: f64, kappa_oe: f64) -> f64 {
    wrap(reflection_arg(detuning + f, kappa_o, kappa_oe) - reflection_arg(detuning, kappa_o, kappa_oe))
}

/// Magnitude `|r(Δ + f)|` of the reflected sideband.
pub fn sideband_magnitude(f: f64, detuning: f64, kappa_o: f64, kappa_oe: f64) -> f64 {
    reflection(detuning + f, 0.0, kappa_o, kappa_oe).sqrt()
}

fn reflection_parts(delta: f64, kappa_o: f64, kappa_oe: f64) -> (f64, f64, f64, f64) {
    let h = 0.5 * kappa_o;
    let den = h * h + delta * delta;
    let re = 1.0 - kappa_oe * h / den;
    let im = kappa_oe * delta / den;
    let d_re = kappa_oe * h * 2.0 * delta / (den * den);
    let d_im = kappa_oe * (den - 2.0 * delta * delta) / (den * den);
    (re, im, d_re, d_im)
}

fn reflection_arg(delta: f64, kappa_o: f64, kappa_oe: f64) -> f64 {
    let (re, im, _, _) = reflection_parts(delta, kappa_o, kappa_oe);
    im.atan2(re)
}

fn reflection_arg_slope(delta: f64, kappa_o: f64, kappa_oe: f64) -> f64 {
    let (re, im, d_re, d_im) = reflection_parts(delta, kappa_o, kappa_oe);
    (re * d_im - im * d_re) / (re * re + im * im)
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

struct PhaseProblem<'a> {
    f: &'a [f64],
    phase: &'a [f64],
    kappa_o: f64,
    kappa_oe: f64,
    /// Detuning unit, Hz.
    scale: f64,
}

impl Problem for PhaseProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.f.len()
    }
    fn n_params(&self) -> usize {
        2
    }
    fn residuals(&self, p: &[f64], r: &mut [f64]) {
        let det = p[0] * self.scale;
        for (i, (&f, &ph)) in self.f.iter().zip(self.phase).enumerate() {
            r[i] = wrap(sideband_phase(f, det, self.kappa_o, self.kappa_oe) + p[1] - ph);
        }
    }
    fn jacobian(&self, p: &[f64], j: &mut DMatrix<f64>) {
        let det = p[0] * self.scale;
        let ref_slope = reflection_arg_slope(det, self.kappa_o, self.kappa_oe);
        for (i, &f) in self.f.iter().enumerate() {
            j[(i, 0)] = (reflection_arg_slope(det + f, self.kappa_o, self.kappa_oe) - ref_slope) * self.scale;
            j[(i, 1)] = 1.0;
        }
    }
}

/// Fits the pump detuning from a background-subtracted sideband sweep.
///
/// `trace_mag` seeds the search (its minimum sits at `f = -Δ`); the phase
/// trace is fitted with a free constant offset.
pub fn fit_phase_detuning(
    trace_mag: &Trace,
    trace_phase: &Trace,
    kappa_o: f64,
    kappa_oe: f64,
) -> Result<FitResult> {
    let f = trace_phase.x();
    let ph = trace_phase.y();
    if f.len() < 4 {
        return Err(Error::FitFailure("phase trace too short".into()));
    }
    let span = f[f.len() - 1] - f[0];
    let scale = kappa_o;
    let problem = PhaseProblem {
        f,
        phase: ph,
        kappa_o,
        kappa_oe,
        scale,
    };

    // Candidate starts: the magnitude minimum plus a coarse scan.
    let mut starts = Vec::new();
    if let Some((i, _)) = trace_mag.y().iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
        starts.push(-trace_mag.x()[i]);
    }
    let lo = -f[f.len() - 1] - 2.0 * kappa_o;
    let hi = -f[0] + 2.0 * kappa_o;
    let n_scan = ((hi - lo) / (0.25 * kappa_o)).ceil().clamp(8.0, 4000.0) as usize;
    starts.extend((0..=n_scan).map(|k| lo + (hi - lo) * k as f64 / n_scan as f64));
    starts.push(0.0);
    let mut r = vec![0.0; f.len()];
    let cost = |det: f64, r: &mut [f64]| {
        let off = mean_wrapped_offset(f, ph, det, kappa_o, kappa_oe);
        problem.residuals(&[det / scale, off], r);
        r.iter().map(|v| v * v).sum::<f64>()
    };
    let mut ranked: Vec<(f64, f64)> = starts.iter().map(|&d| (cost(d, &mut r), d)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<lsq::Solution> = None;
    for &(_, d0) in ranked.iter().take(3) {
        let off = mean_wrapped_offset(f, ph, d0, kappa_o, kappa_oe);
        let sol = lsq::solve(&problem, &[d0 / scale, off], Options::default())?;
        if best.as_ref().is_none_or(|b| sol.ssr < b.ssr) {
            best = Some(sol);
        }
    }
    let sol = best.expect("three starts");
    let se = sol.std_errors();
    let mut out = FitResult::new(sol.rms(f.len()), sol.converged);
    out.push("detuning", sol.params[0] * scale, se[0] * scale, "Hz");
    out.push("phase_offset", wrap(sol.params[1]), se[1], "rad");
    if span < kappa_o {
        out.warnings.push(format!(
            "sweep span {span:e} Hz is narrower than the optical linewidth; phase wrap is ambiguous"
        ));
    }
    Ok(out)
}

fn mean_wrapped_offset(f: &[f64], ph: &[f64], det: f64, kappa_o: f64, kappa_oe: f64) -> f64 {
    let (s, c) = f.iter().zip(ph).fold((0.0, 0.0), |(s, c), (&fi, &p)| {
        let d = p - sideband_phase(fi, det, kappa_o, kappa_oe);
        (s + d.sin(), c + d.cos())
    });
    s.atan2(c)
}

// ---------------------------------------------------------------------------
// Linewidth against photon number

/// Line fit of `γ(n_c) = γ_m,i ∓ (4 g²/κ) n_c`, returning `g_om`, `gamma_mi`
/// and `slope`. Unweighted unless `weights` is given.
pub fn fit_linewidth_vs_photons(
    points: &[(f64, f64)],
    sideband: Sideband,
    kappa_o: f64,
    weights: Option<&[f64]>,
) -> Result<FitResult> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    if !(kappa_o > 0.0) {
        return Err(Error::invalid("kappa_o", "must be > 0"));
    }
    let n_scale = points.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let x = DMatrix::from_fn(points.len(), 2, |i, k| if k == 0 { 1.0 } else { points[i].0 / n_scale });
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (beta, cov, ssr) = lsq::linear(&x, &y, weights)?;
    let slope = beta[1] / n_scale;
    let slope_se = cov[(1, 1)].max(0.0).sqrt() / n_scale;

    let wrong_sign = match sideband {
        Sideband::Blue => slope > 0.0,
        Sideband::Red => slope < 0.0,
    };
    let y_scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let significant = slope.abs() * n_scale > 1e-9 * y_scale && slope.abs() > 2.0 * slope_se;
    if wrong_sign && significant {
        return Err(Error::SignMismatch {
            expected: sideband.as_str(),
            slope,
        });
    }
    let magnitude = if wrong_sign { 0.0 } else { slope.abs() };
    let g_om = (magnitude * kappa_o / 4.0).sqrt();
    let g_se = if g_om > 0.0 {
        kappa_o / 8.0 * slope_se / g_om
    } else {
        (slope_se * kappa_o / 4.0).sqrt()
    };
    let mut out = FitResult::new((ssr / points.len() as f64).sqrt(), true);
    out.push("g_om", g_om, g_se, "Hz");
    out.push("gamma_mi", beta[0], cov[(0, 0)].max(0.0).sqrt(), "Hz");
    out.push("slope", slope, slope_se, "Hz");
    Ok(out)
}

// ---------------------------------------------------------------------------
// Multi-Lorentzian

/// Background model for [`fit_lorentzian_multi`].
#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    Constant,
    Linear,
    /// Subtract a measured reference (interpolated onto the trace grid) and
    /// fit no background parameters.
    FromReference(Trace),
}

/// Lorentzian with unit area: `(γ/2)/π / ((f - f_0)² + (γ/2)²)`.
pub fn lorentzian(f: f64, center: f64, fwhm: f64) -> f64 {
    let h = 0.5 * fwhm;
    h / PI / ((f - center).powi(2) + h * h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakEstimate {
    pub center: f64,
    pub fwhm: f64,
    pub area: f64,
    pub center_se: f64,
    pub fwhm_se: f64,
    pub area_se: f64,
}

#[derive(Debug, Clone)]
pub struct MultiPeakFit {
    /// Peaks sorted by center frequency.
    pub peaks: Vec<PeakEstimate>,
    /// Background coefficients `[offset]` or `[offset, slope per Hz]`
    /// evaluated at the trace midpoint; empty for a reference background.
    pub background: Vec<f64>,
    pub result: FitResult,
    /// Parameter correlation matrix, ordered `[c, w, a]` per peak (in fit
    /// order) then background terms.
    pub correlation: DMatrix<f64>,
    /// Maps sorted peak index to fit-order index.
    order: Vec<usize>,
}

impl MultiPeakFit {
    /// Correlation between the centers of sorted peaks `a` and `b`.
    pub fn center_correlation(&self, a: usize, b: usize) -> f64 {
        self.correlation[(3 * self.order[a], 3 * self.order[b])]
    }

    /// Correlation between the areas of sorted peaks `a` and `b`.
    pub fn area_correlation(&self, a: usize, b: usize) -> f64 {
        self.correlation[(3 * self.order[a] + 2, 3 * self.order[b] + 2)]
    }

    /// Evaluates the fitted model (including background) at `f`.
    pub fn eval(&self, f: f64, x_mid: f64) -> f64 {
        let bg = match self.background.as_slice() {
            [] => 0.0,
            [b0] => *b0,
            [b0, b1, ..] => b0 + b1 * (f - x_mid),
        };
        bg + self.peaks.iter().map(|p| p.area * lorentzian(f, p.center, p.fwhm)).sum::<f64>()
    }
}

struct MultiProblem<'a> {
    u: &'a [f64],
    y: &'a [f64],
    n_peaks: usize,
    n_bg: usize,
}

impl MultiProblem<'_> {
    fn model(&self, p: &[f64], u: f64) -> f64 {
        let mut v = 0.0;
        for k in 0..self.n_peaks {
            let (c, w, a) = (p[3 * k], p[3 * k + 1], p[3 * k + 2]);
            v += a * lorentzian(u, c, w);
        }
        let b = &p[3 * self.n_peaks..];
        if self.n_bg >= 1 {
            v += b[0];
        }
        if self.n_bg >= 2 {
            v += b[1] * u;
        }
        v
    }
}

impl Problem for MultiProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.u.len()
    }
    fn n_params(&self) -> usize {
        3 * self.n_peaks + self.n_bg
    }
    fn residuals(&self, p: &[f64], r: &mut [f64]) {
        for (i, (&u, &y)) in self.u.iter().zip(self.y).enumerate() {
            r[i] = self.model(p, u) - y;
        }
    }
    fn jacobian(&self, p: &[f64], j: &mut DMatrix<f64>) {
        for (i, &u) in self.u.iter().enumerate() {
            for k in 0..self.n_peaks {
                let (c, w, a) = (p[3 * k], p[3 * k + 1], p[3 * k + 2]);
                let h = 0.5 * w;
                let v = u - c;
                let den = v * v + h * h;
                let l = h / PI / den;
                j[(i, 3 * k)] = a * h / PI * 2.0 * v / (den * den);
                j[(i, 3 * k + 1)] = a * 0.5 / PI * (v * v - h * h) / (den * den);
                j[(i, 3 * k + 2)] = l;
            }
            let base = 3 * self.n_peaks;
            if self.n_bg >= 1 {
                j[(i, base)] = 1.0;
            }
            if self.n_bg >= 2 {
                j[(i, base + 1)] = u;
            }
        }
    }
    fn admissible(&self, p: &[f64]) -> bool {
        (0..self.n_peaks).all(|k| p[3 * k + 1] > 0.0)
    }
}

/// Linear interpolation of `reference` onto `x` (clamped at the ends).
pub(crate) fn interpolate(reference: &Trace, x: &[f64]) -> Vec<f64> {
    let (rx, ry) = (reference.x(), reference.y());
    x.iter()
        .map(|&xi| {
            if rx.is_empty() {
                return 0.0;
            }
            match rx.partition_point(|&v| v < xi) {
                0 => ry[0],
                k if k >= rx.len() => ry[rx.len() - 1],
                k => {
                    let t = (xi - rx[k - 1]) / (rx[k] - rx[k - 1]);
                    ry[k - 1] + t * (ry[k] - ry[k - 1])
                }
            }
        })
        .collect()
}

/// Sum-of-Lorentzians plus background fit, seeded by iterative peak picking.
pub fn fit_lorentzian_multi(trace: &Trace, n_peaks: usize, background: &Background) -> Result<MultiPeakFit> {
    let x = trace.x();
    if x.len() < 3 * n_peaks + 2 {
        return Err(Error::Degenerate(format!(
            "{} samples are too few for {n_peaks} peaks",
            x.len()
        )));
    }
    let x_mid = 0.5 * (x[0] + x[x.len() - 1]);
    let x_scale = 0.5 * (x[x.len() - 1] - x[0]);
    let u: Vec<f64> = x.iter().map(|&v| (v - x_mid) / x_scale).collect();

    let mut y = trace.y().to_vec();
    if let Background::FromReference(r) = background {
        for (yi, ri) in y.iter_mut().zip(interpolate(r, x)) {
            *yi -= ri;
        }
    }
    let y_scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let yn: Vec<f64> = y.iter().map(|v| v / y_scale).collect();

    let n_bg = match background {
        Background::Constant => 1,
        Background::Linear => 2,
        Background::FromReference(_) => 0,
    };
    let (l, r) = (edge_median(&yn, true), edge_median(&yn, false));
    let mut bg0 = match n_bg {
        0 => vec![],
        1 => vec![0.5 * (l + r)],
        _ => vec![0.5 * (l + r), 0.5 * (r - l)],
    };
    let bg_at = |b: &[f64], u: f64| match b {
        [] => 0.0,
        [b0] => *b0,
        [b0, b1, ..] => b0 + b1 * u,
    };

    // Iterative peak picking: take the maximum, fit it alone, subtract.
    let mut resid: Vec<f64> = yn.iter().zip(&u).map(|(y, &u)| y - bg_at(&bg0, u)).collect();
    let mut p0 = Vec::with_capacity(3 * n_peaks + n_bg);
    for _ in 0..n_peaks {
        let (i, &h) = resid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        let w = half_width(&u, &resid, i, 0.5 * h, true).max(1e-9);
        let mut guess = [u[i], w, PI * h * w / 2.0];
        let single = MultiProblem {
            u: &u,
            y: &resid,
            n_peaks: 1,
            n_bg: 0,
        };
        if let Ok(sol) = lsq::solve(&single, &guess, Options { max_iter: 50, ..Options::default() }) {
            if sol.params[1] > 0.0 && sol.params[2] > 0.0 {
                guess = [sol.params[0], sol.params[1], sol.params[2]];
            }
        }
        for (rv, &uv) in resid.iter_mut().zip(&u) {
            *rv -= guess[2] * lorentzian(uv, guess[0], guess[1]);
        }
        p0.extend_from_slice(&guess);
    }
    if n_bg > 0 && n_peaks > 0 {
        // Re-seed the background from what the peaks leave behind.
        let mut rest: Vec<f64> = resid.iter().zip(&u).map(|(r, &u)| r + bg_at(&bg0, u)).collect();
        bg0[0] = median(&mut rest);
    }
    p0.extend_from_slice(&bg0);

    let problem = MultiProblem {
        u: &u,
        y: &yn,
        n_peaks,
        n_bg,
    };
    let sol = if p0.is_empty() {
        return Err(Error::Degenerate("nothing to fit: no peaks and no background".into()));
    } else {
        lsq::solve(&problem, &p0, Options::default())?
    };
    let se = sol.std_errors();
    let mut result = FitResult::new(sol.rms(u.len()) * y_scale, sol.converged);

    let mut order: Vec<usize> = (0..n_peaks).collect();
    order.sort_by(|&a, &b| sol.params[3 * a].total_cmp(&sol.params[3 * b]));
    let peaks: Vec<PeakEstimate> = order
        .iter()
        .map(|&k| PeakEstimate {
            center: x_mid + sol.params[3 * k] * x_scale,
            fwhm: sol.params[3 * k + 1] * x_scale,
            area: sol.params[3 * k + 2] * x_scale * y_scale,
            center_se: se[3 * k] * x_scale,
            fwhm_se: se[3 * k + 1] * x_scale,
            area_se: se[3 * k + 2] * x_scale * y_scale,
        })
        .collect();
    for (i, p) in peaks.iter().enumerate() {
        result.push(format!("f_{i}"), p.center, p.center_se, "Hz");
        result.push(format!("gamma_{i}"), p.fwhm, p.fwhm_se, "Hz");
        result.push(format!("area_{i}"), p.area, p.area_se, "");
    }
    let b = &sol.params[3 * n_peaks..];
    let bse = &se[3 * n_peaks..];
    let mut background_out = Vec::new();
    if n_bg >= 1 {
        background_out.push(b[0] * y_scale);
        result.push("background", b[0] * y_scale, bse[0] * y_scale, "");
    }
    if n_bg >= 2 {
        background_out.push(b[1] * y_scale / x_scale);
        result.push("background_slope", b[1] * y_scale / x_scale, bse[1] * y_scale / x_scale, "1/Hz");
    }

    let n = sol.params.len();
    let correlation = DMatrix::from_fn(n, n, |a, b| sol.correlation(a, b));
    if sol.singular || se.iter().any(|s| !s.is_finite()) {
        result
            .warnings
            .push("covariance singular: peaks are degenerate or overlap".into());
    } else {
        for i in 0..n_peaks {
            for j in (i + 1)..n_peaks {
                let c = correlation[(3 * i + 2, 3 * j + 2)].abs();
                if c > 0.95 {
                    result
                        .warnings
                        .push(format!("peaks {i} and {j} strongly correlated (|ρ| = {c:.3})"));
                }
            }
        }
    }
    if let Some(k) = peaks.iter().position(|p| !(p.area > 0.0)) {
        result.converged = false;
        result.warnings.push(format!("peak {k} has no positive area above the background"));
    }
    Ok(MultiPeakFit {
        peaks,
        background: background_out,
        result,
        correlation,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{linspace, XUnit, YUnit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| sigma * d.sample(&mut rng)).collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn dip_trace(f_o: f64, k: f64, ke: f64, sigma: f64, seed: u64) -> Trace {
        let grid = linspace(f_o - 5.0 * k, f_o + 5.0 * k, 2001);
        let n = noise(grid.len(), sigma, seed);
        let y = grid.iter().zip(&n).map(|(&f, e)| reflection(f, f_o, k, ke) + e).collect();
        Trace::new(grid, y, XUnit::Hz, YUnit::Linear).unwrap()
    }

    #[test]
    fn dip_round_trip_with_noise() {
        let t = dip_trace(194.9e12, 2.1e9, 0.99e9, 0.01, 1);
        let fit = fit_optical_dip(&t, CouplingBranch::Under).unwrap();
        let r = &fit.result;
        assert!(r.converged);
        assert!((r.value("f_o") - 194.9e12).abs() < 0.02 * 2.1e9);
        assert!(rel(r.value("kappa_o"), 2.1e9) < 0.02);
        assert!(rel(r.value("kappa_oe"), 0.99e9) < 0.02, "{}", r.value("kappa_oe"));
        assert!(rel(fit.over.kappa_oe, 1.11e9) < 0.02);
    }

    #[test]
    fn critical_coupling_reaches_zero() {
        assert_eq!(reflection(1.0, 1.0, 2.0, 1.0), 0.0);
        let t = dip_trace(0.0, 1.0, 0.5, 0.0, 0);
        let fit = fit_optical_dip(&t, CouplingBranch::Over).unwrap();
        assert!((fit.under.kappa_oe - fit.over.kappa_oe).abs() < 1e-6);
    }

    #[test]
    fn flat_trace_has_no_dip() {
        let grid = linspace(0.0, 1.0, 100);
        let t = Trace::new(grid, vec![1.0; 100], XUnit::Hz, YUnit::Linear).unwrap();
        assert!(matches!(fit_optical_dip(&t, CouplingBranch::Under), Err(Error::FitFailure(_))));
    }

    #[test]
    fn dip_residual_beats_both_pure_starts() {
        let t = dip_trace(0.0, 1.0, 0.3, 0.005, 9);
        let fit = fit_optical_dip(&t, CouplingBranch::Under).unwrap();
        for ke in [0.3, 0.7] {
            let r: f64 = t
                .x()
                .iter()
                .zip(t.y())
                .map(|(&f, &y)| (reflection(f, 0.0, 1.0, ke) - y).powi(2))
                .sum::<f64>();
            let rms = (r / t.len() as f64).sqrt();
            assert!(fit.result.residual_norm <= rms * (1.0 + 1e-9));
        }
    }

    fn phase_traces(det: f64, sigma: f64, seed: u64) -> (Trace, Trace) {
        let (k, ke) = (2.1e9, 0.99e9);
        let grid = linspace(-10e9, 10e9, 1001);
        let n = noise(grid.len(), sigma, seed);
        let mag = Trace::from_fn(&grid, XUnit::Hz, YUnit::Linear, |f| sideband_magnitude(f, det, k, ke)).unwrap();
        let y = grid.iter().zip(&n).map(|(&f, e)| wrap(sideband_phase(f, det, k, ke) + e)).collect();
        (mag, Trace::new(grid, y, XUnit::Hz, YUnit::Radians).unwrap())
    }

    #[test]
    fn phase_detuning_round_trip_and_parity() {
        for det in [4.32e9, -4.32e9] {
            let (m, p) = phase_traces(det, 0.01, 3);
            let fit = fit_phase_detuning(&m, &p, 2.1e9, 0.99e9).unwrap();
            assert!(rel(fit.value("detuning"), det) < 0.01, "{}", fit.value("detuning"));
        }
        let (m, p) = phase_traces(0.0, 0.0, 0);
        let fit = fit_phase_detuning(&m, &p, 2.1e9, 0.99e9).unwrap();
        assert!(fit.value("detuning").abs() < 1e3);
    }

    #[test]
    fn zero_detuning_profile_is_antisymmetric() {
        for f in [1e8, 1e9, 3e9] {
            let a = sideband_phase(f, 0.0, 2.1e9, 0.99e9);
            let b = sideband_phase(-f, 0.0, 2.1e9, 0.99e9);
            assert!((a + b).abs() < 1e-12);
        }
        // Mirror symmetry under detuning sign flip.
        let a = sideband_phase(1.3e9, 4.32e9, 2.1e9, 0.99e9);
        let b = sideband_phase(-1.3e9, -4.32e9, 2.1e9, 0.99e9);
        assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn narrow_sweep_warns() {
        let grid = linspace(-4.8e9, -3.8e9, 201);
        let mag = Trace::from_fn(&grid, XUnit::Hz, YUnit::Linear, |f| sideband_magnitude(f, 4.32e9, 2.1e9, 0.99e9)).unwrap();
        let ph = Trace::from_fn(&grid, XUnit::Hz, YUnit::Radians, |f| sideband_phase(f, 4.32e9, 2.1e9, 0.99e9)).unwrap();
        let fit = fit_phase_detuning(&mag, &ph, 2.1e9, 0.99e9).unwrap();
        assert!(!fit.warnings.is_empty());
    }

    #[test]
    fn linewidth_line_round_trip() {
        let (g, gi, k) = (130e3, 8.4e6, 2.1e9);
        let ns = linspace(2e3, 2e4, 8);
        let e = noise(ns.len(), 0.02, 4);
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .zip(&e)
            .map(|(&n, e)| (n, (gi - 4.0 * g * g / k * n) * (1.0 + e)))
            .collect();
        let fit = fit_linewidth_vs_photons(&pts, Sideband::Blue, k, None).unwrap();
        assert!(rel(fit.value("g_om"), g) < 0.03, "{}", fit.value("g_om"));
        assert!(rel(fit.value("gamma_mi"), gi) < 0.03);
        assert!(matches!(
            fit_linewidth_vs_photons(&pts, Sideband::Red, k, None),
            Err(Error::SignMismatch { .. })
        ));
    }

    #[test]
    fn linewidth_degenerate_and_flat() {
        let same = [(1e4, 8e6), (1e4, 8.1e6), (1e4, 7.9e6)];
        assert!(matches!(
            fit_linewidth_vs_photons(&same, Sideband::Blue, 2.1e9, None),
            Err(Error::Degenerate(_))
        ));
        let flat = [(1e3, 8e6), (2e3, 8e6), (3e3, 8e6), (4e3, 8e6)];
        let fit = fit_linewidth_vs_photons(&flat, Sideband::Blue, 2.1e9, None).unwrap();
        assert!(fit.value("g_om") < 1.0);
        assert!(rel(fit.value("gamma_mi"), 8e6) < 1e-12);
        assert!(fit_linewidth_vs_photons(&flat[..2], Sideband::Blue, 2.1e9, None).is_err());
    }

    #[test]
    fn linewidth_scale_consistency() {
        let pts: Vec<(f64, f64)> = (1..6).map(|i| (i as f64 * 1e3, 8e6 - 30.0 * i as f64 * 1e3)).collect();
        let a = fit_linewidth_vs_photons(&pts, Sideband::Blue, 2.1e9, None).unwrap();
        let s = 7.0;
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(n, g)| (n * s, g)).collect();
        let b = fit_linewidth_vs_photons(&scaled, Sideband::Blue, 2.1e9, None).unwrap();
        assert!(rel(b.value("slope") * s, a.value("slope")) < 1e-10);
        assert!(rel(b.value("g_om") * s.sqrt(), a.value("g_om")) < 1e-10);
    }

    fn peaks_trace(peaks: &[(f64, f64, f64)], bg: f64, sigma: f64, seed: u64) -> Trace {
        let grid = linspace(4.2e9, 4.44e9, 2401);
        let n = noise(grid.len(), sigma, seed);
        let y = grid
            .iter()
            .zip(&n)
            .map(|(&f, e)| bg + e + peaks.iter().map(|&(c, w, a)| a * lorentzian(f, c, w)).sum::<f64>())
            .collect();
        Trace::new(grid, y, XUnit::Hz, YUnit::Linear).unwrap()
    }

    #[test]
    fn single_lorentzian_round_trip() {
        let area = 1e7;
        let height = area * 2.0 / (PI * 8.4e6);
        let t = peaks_trace(&[(4.32e9, 8.4e6, area)], 0.2 * height, 0.001 * height, 5);
        let fit = fit_lorentzian_multi(&t, 1, &Background::Constant).unwrap();
        let p = fit.peaks[0];
        assert!((p.center - 4.32e9).abs() < 0.01 * 8.4e6);
        assert!(rel(p.fwhm, 8.4e6) < 0.01);
        assert!(rel(p.area, area) < 0.01);
        assert!(rel(fit.background[0], 0.2 * height) < 0.01);
    }

    #[test]
    fn flat_trace_has_no_peak() {
        let t = Trace::from_fn(&linspace(0.0, 10.0, 50), XUnit::Hz, YUnit::Linear, |_| 1.0).unwrap();
        let fit = fit_lorentzian_multi(&t, 1, &Background::Constant).unwrap();
        assert!(!fit.result.converged);
    }

    #[test]
    fn separated_peaks_are_independent() {
        let area = 1e7;
        let height = area * 2.0 / (PI * 8.4e6);
        let mut last_area_corr = f64::INFINITY;
        for sep in [3.0, 10.0] {
            let t = peaks_trace(
                &[(4.36e9, 8.4e6, 0.6 * area), (4.36e9 - sep * 8.4e6, 8.4e6, area)],
                0.0,
                0.002 * height,
                6,
            );
            let fit = fit_lorentzian_multi(&t, 2, &Background::Linear).unwrap();
            assert!(fit.peaks[0].center < fit.peaks[1].center);
            assert!(rel(fit.peaks[0].area, area) < 0.02, "{sep}: {:?}", fit.peaks);
            assert!(rel(fit.peaks[1].area, 0.6 * area) < 0.02, "{sep}: {:?}", fit.peaks);
            let rho = fit.area_correlation(0, 1).abs();
            if sep >= 10.0 {
                // The shared background is the only remaining link.
                assert!(fit.center_correlation(0, 1).abs() < 0.05);
                assert!(rho < 0.2, "{rho}");
            }
            assert!(rho < last_area_corr, "{sep}: {rho} {last_area_corr}");
            last_area_corr = rho;
        }
    }

    #[test]
    fn background_only_fit() {
        let t = peaks_trace(&[], 3.0, 0.1, 7);
        let fit = fit_lorentzian_multi(&t, 0, &Background::Constant).unwrap();
        assert!(fit.peaks.is_empty());
        assert!((fit.background[0] - 3.0).abs() < 0.01);
        assert!(rel(fit.result.residual_norm, 0.1) < 0.05);
    }

    #[test]
    fn reference_background_is_subtracted() {
        let area = 1e7;
        let height = area * 2.0 / (PI * 8.4e6);
        let t = peaks_trace(&[(4.32e9, 8.4e6, area)], 0.0, 0.0, 0);
        let bg = Trace::from_fn(t.x(), XUnit::Hz, YUnit::Linear, |f| 0.1 * height * (1.0 + (f - 4.2e9) / 1e9)).unwrap();
        let y: Vec<f64> = t.y().iter().zip(bg.y()).map(|(a, b)| a + b).collect();
        let total = Trace::new(t.x().to_vec(), y, XUnit::Hz, YUnit::Linear).unwrap();
        let fit = fit_lorentzian_multi(&total, 1, &Background::FromReference(bg)).unwrap();
        assert!(rel(fit.peaks[0].area, area) < 1e-6);
    }
}
