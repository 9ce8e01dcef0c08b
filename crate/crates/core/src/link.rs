//! Classical bit transmission through the mechanical mode.
//!
//! Only the complex baseband envelope `β(t)` of the mechanical mode is
//! integrated. Bits switch a piecewise-constant drive, so each sample uses
//! the exact update `β ← β e^{−πγΔt} + u (1 − e^{−πγΔt})`, normalised so a
//! settled 1 gives `|β| = 1`. The detector sees `I + iQ = V₀ β e^{i2π f_IF t}`
//! plus independent Gaussian noise on each quadrature.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::fit::{self, FitResult};
use crate::lsq::{self, Options, Problem};
use crate::trace::{Trace, XUnit, YUnit};

/// Minimum simulated sample rate in units of the mechanical linewidth.
pub const MIN_SAMPLES_PER_LINEWIDTH: f64 = 20.0;

/// Extinction ratios above this are reported as the cap.
pub const EXTINCTION_CAP: f64 = 1e6;

/// How a logical 1 excites the mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriveMode {
    /// Coherent tone: the amplitude rings up at `πγ`.
    #[default]
    Coherent,
    /// White-noise bath: the mean occupation relaxes at `2πγ`, and the
    /// envelope reports `√n`.
    ThermalBath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    pub bits: Vec<bool>,
    /// Bit rate, bit/s.
    pub rate: f64,
    /// Intermediate frequency of the demodulated signal, Hz.
    pub f_if: f64,
    /// Settled envelope amplitude, V.
    pub v0: f64,
    /// Mechanical linewidth in operation, Hz.
    pub gamma_m: f64,
    /// Noise per quadrature after demodulation, V.
    pub noise_rms: f64,
    pub samples_per_bit: usize,
    pub drive: DriveMode,
}

impl LinkConfig {
    /// Noise-free configuration with `f_IF = 50 MHz`, `V₀ = 1` and the
    /// smallest even sampling density that satisfies the linewidth criterion.
    pub fn new(bits: Vec<bool>, rate: f64, gamma_m: f64) -> Self {
        LinkConfig {
            bits,
            rate,
            f_if: 50e6,
            v0: 1.0,
            gamma_m,
            noise_rms: 0.0,
            samples_per_bit: min_samples_per_bit(rate, gamma_m),
            drive: DriveMode::Coherent,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.bits.is_empty() {
            out.push("bits must not be empty".into());
        }
        for (name, v) in [("rate", self.rate), ("gamma_m", self.gamma_m), ("v0", self.v0)] {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} must be > 0 (got {v})"));
            }
        }
        if !(self.noise_rms.is_finite() && self.noise_rms >= 0.0) {
            out.push(format!("noise_rms must be >= 0 (got {})", self.noise_rms));
        }
        if !self.f_if.is_finite() {
            out.push("f_if must be finite".into());
        }
        if self.samples_per_bit < 8 {
            out.push(format!("samples_per_bit must be >= 8 (got {})", self.samples_per_bit));
        }
        out
    }

    pub fn bit_period(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.rate * self.samples_per_bit as f64)
    }
}

/// Smallest even `samples_per_bit >= 8` with `spb · R >= 20 γ`.
pub fn min_samples_per_bit(rate: f64, gamma_m: f64) -> usize {
    let n = (MIN_SAMPLES_PER_LINEWIDTH * gamma_m / rate).ceil();
    let n = if n.is_finite() { n.max(8.0) as usize } else { 8 };
    n + n % 2
}

/// Parses a `0`/`1` string, ignoring whitespace and `_`.
pub fn parse_bits(s: &str) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    for (i, c) in s.chars().enumerate() {
        match c {
            '0' => out.push(false),
            '1' => out.push(true),
            c if c.is_whitespace() || c == '_' => {}
            c => return Err(Error::Parse(format!("invalid bit `{c}` at position {}", i + 1))),
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("bit string".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LinkRun {
    /// `|V_det(t)|`, including noise.
    pub envelope: Trace,
    pub i: Trace,
    pub q: Trace,
    /// Noise-free `V₀ |β(t)|`.
    pub clean: Trace,
}

/// Simulates the link. Samples sit at `k Δt` for `k = 0 ..= N · spb`; bit
/// `b` drives the interval `[b T, (b + 1) T)`.
pub fn run_link(cfg: &LinkConfig, seed: u64) -> Result<LinkRun> {
    let errs = cfg.violations();
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let spb = cfg.samples_per_bit;
    let sample_rate = spb as f64 * cfg.rate;
    if sample_rate < MIN_SAMPLES_PER_LINEWIDTH * cfg.gamma_m * (1.0 - 1e-12) {
        return Err(Error::Sampling(format!(
            "samples_per_bit · rate = {sample_rate:e} Hz is below 20 · gamma_m = {:e} Hz; use samples_per_bit >= {}",
            MIN_SAMPLES_PER_LINEWIDTH * cfg.gamma_m,
            min_samples_per_bit(cfg.rate, cfg.gamma_m)
        )));
    }
    let dt = cfg.dt();
    let n = cfg.bits.len() * spb + 1;
    let a = (-PI * cfg.gamma_m * dt).exp();

    let mut level = Vec::with_capacity(n);
    let mut x = 0.0;
    level.push(x);
    for k in 0..n - 1 {
        let u = if cfg.bits[k / spb] { 1.0 } else { 0.0 };
        x = match cfg.drive {
            DriveMode::Coherent => x * a + u * (1.0 - a),
            DriveMode::ThermalBath => x * a * a + u * (1.0 - a * a),
        };
        level.push(x);
    }
    let amplitude: Vec<f64> = match cfg.drive {
        DriveMode::Coherent => level.iter().map(|b| cfg.v0 * b).collect(),
        DriveMode::ThermalBath => level.iter().map(|nm| cfg.v0 * nm.max(0.0).sqrt()).collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.noise_rms.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid("noise_rms", e.to_string()))?;
    let t: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let mut iv = Vec::with_capacity(n);
    let mut qv = Vec::with_capacity(n);
    for (&tk, &amp) in t.iter().zip(&amplitude) {
        let mut v = amp * Complex64::from_polar(1.0, 2.0 * PI * cfg.f_if * tk);
        if cfg.noise_rms > 0.0 {
            v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
        iv.push(v.re);
        qv.push(v.im);
    }
    let env: Vec<f64> = iv.iter().zip(&qv).map(|(i, q)| i.hypot(*q)).collect();

    let mk = |y: Vec<f64>, label: &str| -> Result<Trace> {
        let mut tr = Trace::new(t.clone(), y, XUnit::Seconds, YUnit::Volts)?;
        tr.meta.x_label = "time".into();
        tr.meta.y_label = label.into();
        Ok(tr)
    };
    Ok(LinkRun {
        envelope: mk(env, "|V_det|")?,
        i: mk(iv, "I")?,
        q: mk(qv, "Q")?,
        clean: mk(amplitude, "clean envelope")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EyeMetrics {
    /// Smallest sampled 1 minus largest sampled 0, clamped at zero, V.
    pub opening: f64,
    /// Mean sampled 1 over mean sampled 0, capped at [`EXTINCTION_CAP`].
    pub extinction_ratio: f64,
    pub extinction_db: f64,
    pub mean_high: f64,
    pub mean_low: f64,
    pub transitions: usize,
}

#[derive(Debug, Clone)]
pub struct Eye {
    /// Window time relative to the transition, from `−T` to `+T`.
    pub time: Vec<f64>,
    /// One overlaid envelope segment per transition.
    pub segments: Vec<Vec<f64>>,
    /// Whether each segment is a rising edge.
    pub rising: Vec<bool>,
    pub metrics: EyeMetrics,
}

impl Eye {
    /// CSV with a `t_s` column and one column per overlaid edge.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["t_s".to_string()];
        header.extend((0..self.segments.len()).map(|k| {
            format!("{}_{}", if self.rising[k] { "rise" } else { "fall" }, k + 1)
        }));
        let mut write = || -> csv::Result<()> {
            w.write_record(&header)?;
            for (k, t) in self.time.iter().enumerate() {
                let row = std::iter::once(*t).chain(self.segments.iter().map(|s| s[k]));
                w.write_record(row.map(|v| format!("{v:e}")))?;
            }
            Ok(())
        };
        write().expect("writing to memory cannot fail");
        String::from_utf8(w.into_inner().expect("in-memory buffer")).expect("ascii output")
    }
}

/// Overlays two-unit-interval windows centred on every transition and
/// samples each bit at the centre of its unit interval.
pub fn eye_diagram(run: &LinkRun, cfg: &LinkConfig) -> Result<Eye> {
    let spb = cfg.samples_per_bit;
    let env = run.envelope.y();
    if env.len() != cfg.bits.len() * spb + 1 {
        return Err(Error::invalid("run", "does not match the link configuration"));
    }
    let edges: Vec<usize> = (1..cfg.bits.len()).filter(|&b| cfg.bits[b] != cfg.bits[b - 1]).collect();
    if edges.len() < 2 {
        return Err(Error::Empty(format!(
            "eye diagram needs at least 2 transitions (found {})",
            edges.len()
        )));
    }
    let dt = cfg.dt();
    let time = (0..=2 * spb).map(|k| (k as f64 - spb as f64) * dt).collect();
    let segments = edges
        .iter()
        .map(|&b| env[(b - 1) * spb..=(b + 1) * spb].to_vec())
        .collect();
    let rising = edges.iter().map(|&b| cfg.bits[b]).collect();

    let (mut highs, mut lows) = (Vec::new(), Vec::new());
    for (b, &bit) in cfg.bits.iter().enumerate() {
        let v = env[b * spb + spb / 2];
        if bit {
            highs.push(v);
        } else {
            lows.push(v);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mean_high, mean_low) = (mean(&highs), mean(&lows));
    let opening = (highs.iter().copied().fold(f64::INFINITY, f64::min)
        - lows.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    .max(0.0);
    let extinction_ratio = if mean_low * EXTINCTION_CAP <= mean_high {
        EXTINCTION_CAP
    } else {
        mean_high / mean_low
    };
    Ok(Eye {
        time,
        segments,
        rising,
        metrics: EyeMetrics {
            opening,
            extinction_ratio,
            extinction_db: 10.0 * extinction_ratio.log10(),
            mean_high,
            mean_low,
            transitions: edges.len(),
        },
    })
}

/// Envelope from the transition into bit `bit` until the next transition
/// (or the end of the run).
pub fn edge_segment(run: &LinkRun, cfg: &LinkConfig, bit: usize) -> Result<Trace> {
    if bit == 0 || bit >= cfg.bits.len() || cfg.bits[bit] == cfg.bits[bit - 1] {
        return Err(Error::invalid("bit", "must index a transition"));
    }
    let end = (bit + 1..cfg.bits.len())
        .find(|&b| cfg.bits[b] != cfg.bits[bit])
        .unwrap_or(cfg.bits.len());
    let spb = cfg.samples_per_bit;
    let x = run.envelope.x();
    Ok(run.envelope.window(x[bit * spb], x[end * spb]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RingKind {
    /// `V_f (1 − e^{−πγ t})`.
    Up,
    /// `V_i e^{−πγ t}`.
    Down,
}

#[derive(Debug, Clone)]
pub struct RingFit {
    pub result: FitResult,
    /// Fitted linewidth, Hz; NaN when unidentifiable.
    pub gamma_m: f64,
    /// `V_f` for a ring-up, `V_i` for a ring-down.
    pub amplitude: f64,
    pub identifiable: bool,
    /// Residuals are inconsistent with the declared edge shape.
    pub poor_fit: bool,
}

struct RingProblem<'a> {
    tau: &'a [f64],
    y: &'a [f64],
    kind: RingKind,
}

impl RingProblem<'_> {
    fn model(&self, p: &[f64], tau: f64) -> (f64, f64, f64) {
        let e = (-p[1] * tau).exp();
        match self.kind {
            RingKind::Up => (p[0] * (1.0 - e), 1.0 - e, p[0] * tau * e),
            RingKind::Down => (p[0] * e, e, -p[0] * tau * e),
        }
    }
}

impl Problem for RingProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.tau.len()
    }
    fn n_params(&self) -> usize {
        2
    }
    fn residuals(&self, p: &[f64], r: &mut [f64]) {
        for (k, (&t, &y)) in self.tau.iter().zip(self.y).enumerate() {
            r[k] = self.model(p, t).0 - y;
        }
    }
    fn jacobian(&self, p: &[f64], j: &mut DMatrix<f64>) {
        for (k, &t) in self.tau.iter().enumerate() {
            let (_, dv, dr) = self.model(p, t);
            j[(k, 0)] = dv;
            j[(k, 1)] = dr;
        }
    }
    fn admissible(&self, p: &[f64]) -> bool {
        p[1] > 0.0 && p[1] < 1e4
    }
}

/// Fits a ring-up or ring-down to an envelope segment whose first sample is
/// the transition instant.
pub fn fit_ring(segment: &Trace, kind: RingKind) -> Result<RingFit> {
    let (x, y) = (segment.x(), segment.y());
    if x.len() < 4 {
        return Err(Error::Degenerate("ring segment needs at least 4 samples".into()));
    }
    let span = x[x.len() - 1] - x[0];
    let tau: Vec<f64> = x.iter().map(|t| (t - x[0]) / span).collect();
    let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let sigma = fit::noise_sigma(y);
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));

    if scale == 0.0 || hi - lo <= (6.0 * sigma).max(1e-9 * scale) {
        let mut result = FitResult::new(sigma, false);
        result.push("gamma_m", f64::NAN, f64::INFINITY, "Hz");
        result.push(amplitude_name(kind), fit::median(&mut y.to_vec()), sigma, "V");
        result.warnings.push("gamma_m unidentifiable: segment is flat".into());
        return Ok(RingFit {
            amplitude: result.params[1].value,
            result,
            gamma_m: f64::NAN,
            identifiable: false,
            poor_fit: true,
        });
    }

    let problem = RingProblem { tau: &tau, y, kind };
    let v_start = match kind {
        RingKind::Up => {
            let k = (y.len() / 10).max(1);
            fit::median(&mut y[y.len() - k..].to_vec())
        }
        RingKind::Down => y[0].max(hi * 0.5),
    };
    // 1/e crossing of the declared shape.
    let r_start = {
        let target = match kind {
            RingKind::Up => v_start * (1.0 - (-1.0f64).exp()),
            RingKind::Down => v_start * (-1.0f64).exp(),
        };
        let k = y.iter().position(|&v| match kind {
            RingKind::Up => v >= target,
            RingKind::Down => v <= target,
        });
        match k {
            Some(k) if tau[k] > 0.0 => 1.0 / tau[k],
            _ => 3.0,
        }
    };
    let mut best: Option<lsq::Solution> = None;
    for r0 in [r_start, 1.0, 5.0, 20.0, 100.0] {
        let r0 = r0.clamp(1e-3, 5e3);
        if let Ok(sol) = lsq::solve(&problem, &[v_start, r0], Options::default()) {
            if best.as_ref().is_none_or(|b| sol.ssr < b.ssr) {
                best = Some(sol);
            }
        }
    }
    let sol = best.ok_or_else(|| Error::FitFailure("ring fit failed from every start".into()))?;
    let se = sol.std_errors();
    let gamma_m = sol.params[1] / (PI * span);
    let rms = sol.rms(y.len());
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = 1.0 - sol.ssr / sst;
    let poor_fit = r2 < 0.95 || rms > (3.0 * sigma).max(0.02 * scale);

    let mut result = FitResult::new(rms, sol.converged);
    result.push("gamma_m", gamma_m, se[1] / (PI * span), "Hz");
    result.push(amplitude_name(kind), sol.params[0], se[0], "V");
    if poor_fit {
        result.warnings.push(format!(
            "poor fit: segment does not follow a {} (R^2 = {r2:.3})",
            match kind {
                RingKind::Up => "ring-up",
                RingKind::Down => "ring-down",
            }
        ));
    }
    if sol.params[1] < 0.1 {
        result.warnings.push("segment is much shorter than the decay time".into());
    }
    if sol.singular {
        result.warnings.push("covariance is singular".into());
    }
    Ok(RingFit {
        amplitude: sol.params[0],
        result,
        gamma_m,
        identifiable: true,
        poor_fit,
    })
}

fn amplitude_name(kind: RingKind) -> &'static str {
    match kind {
        RingKind::Up => "v_f",
        RingKind::Down => "v_i",
    }
}

/// Square-wave modulation for the harmonic spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareWave {
    /// Modulation frequency, Hz.
    pub f0: f64,
    pub gamma_m: f64,
    /// Frequency the spectrum is centred on (the mechanical frequency), Hz.
    pub center: f64,
    /// Even number of samples per modulation period.
    pub samples_per_period: usize,
    /// Number of periods transformed; sets the resolution `f0/periods`.
    pub periods: usize,
}

impl SquareWave {
    pub fn new(f0: f64, gamma_m: f64, center: f64) -> Self {
        let spp = min_samples_per_bit(2.0 * f0, gamma_m).max(64);
        SquareWave {
            f0,
            gamma_m,
            center,
            samples_per_period: 2 * spp,
            periods: 8,
        }
    }
}

/// Power spectrum of the mechanical envelope under a 50 % duty, ±1 square
/// wave drive, as lines on the bins `center + k f0 / periods`. Each line
/// holds the power of one Fourier component relative to a settled unit
/// envelope.
pub fn harmonic_spectrum(sq: &SquareWave) -> Result<Trace> {
    if !(sq.f0 > 0.0 && sq.gamma_m > 0.0) {
        return Err(Error::invalid("square wave", "f0 and gamma_m must be > 0"));
    }
    if sq.samples_per_period < 8 || !sq.samples_per_period.is_multiple_of(2) || sq.periods == 0 {
        return Err(Error::invalid(
            "square wave",
            "samples_per_period must be even and >= 8, periods >= 1",
        ));
    }
    let spp = sq.samples_per_period;
    let dt = 1.0 / (sq.f0 * spp as f64);
    if 1.0 / dt < MIN_SAMPLES_PER_LINEWIDTH * sq.gamma_m * (1.0 - 1e-12) {
        return Err(Error::Sampling("square-wave sampling too coarse for gamma_m".into()));
    }
    let a = (-PI * sq.gamma_m * dt).exp();
    let drive = |k: usize| if k % spp < spp / 2 { 1.0 } else { -1.0 };
    // Settle until the transient is below 1e-15.
    let settle = ((35.0 / (PI * sq.gamma_m)) * sq.f0).ceil() as usize * spp;
    let mut beta = 0.0;
    for k in 0..settle {
        beta = beta * a + drive(k) * (1.0 - a);
    }
    let n = spp * sq.periods;
    let mut buf: Vec<Complex64> = Vec::with_capacity(n);
    for k in 0..n {
        buf.push(Complex64::new(beta, 0.0));
        beta = beta * a + drive(k) * (1.0 - a);
    }
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let df = sq.f0 / sq.periods as f64;
    let norm = 1.0 / (n as f64 * n as f64);
    let half = n / 2;
    let (x, y): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|j| {
            // Reorder to ascending frequency: bins half..n are negative.
            let k = (j + half) % n;
            let f = if k >= half { k as f64 - n as f64 } else { k as f64 };
            (sq.center + f * df, buf[k].norm_sqr() * norm)
        })
        .unzip();
    let mut t = Trace::new(x, y, XUnit::Hz, YUnit::Linear)?;
    t.meta.x_label = "frequency".into();
    t.meta.y_label = "line power".into();
    Ok(t)
}

/// Power of the line nearest `f`.
pub fn line_power(spectrum: &Trace, f: f64) -> f64 {
    let x = spectrum.x();
    let k = x.partition_point(|&v| v < f);
    let k = match k {
        0 => 0,
        k if k >= x.len() => x.len() - 1,
        k if (x[k] - f).abs() < (f - x[k - 1]).abs() => k,
        k => k - 1,
    };
    spectrum.y()[k]
}

/// Line power of harmonic `n` of a unit ±1 square wave after a first-order
/// filter of linewidth `gamma_m`: `(2/(πn))² γ²/(γ² + 4 n² f0²)` for odd
/// `n`, zero for even `n`.
pub fn square_wave_line(n: i64, f0: f64, gamma_m: f64) -> f64 {
    if n % 2 == 0 {
        return 0.0;
    }
    let nf = n as f64 * f0;
    (2.0 / (PI * n as f64)).powi(2) * gamma_m * gamma_m / (gamma_m * gamma_m + 4.0 * nf * nf)
}
