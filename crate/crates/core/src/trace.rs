use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Unit of a trace's sample coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XUnit {
    Hz,
    Seconds,
    /// Intracavity photon number or any other dimensionless abscissa.
    Dimensionless,
}

/// Unit of a trace's values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YUnit {
    /// Linear power or power spectral density.
    Linear,
    Db,
    Volts,
    Radians,
    Hz,
}

impl XUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            XUnit::Hz => "hz",
            XUnit::Seconds => "s",
            XUnit::Dimensionless => "1",
        }
    }
}

impl YUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            YUnit::Linear => "linear",
            YUnit::Db => "db",
            YUnit::Volts => "v",
            YUnit::Radians => "rad",
            YUnit::Hz => "hz",
        }
    }
}

impl fmt::Display for XUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for YUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for XUnit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hz" => Ok(XUnit::Hz),
            "s" => Ok(XUnit::Seconds),
            "1" | "" => Ok(XUnit::Dimensionless),
            other => Err(Error::Parse(format!("unknown x unit `{other}`"))),
        }
    }
}

impl FromStr for YUnit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(YUnit::Linear),
            "db" => Ok(YUnit::Db),
            "v" => Ok(YUnit::Volts),
            "rad" => Ok(YUnit::Radians),
            "hz" => Ok(YUnit::Hz),
            other => Err(Error::Parse(format!("unknown y unit `{other}`"))),
        }
    }
}

/// Axis labels and acquisition metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceMeta {
    pub x_label: String,
    pub y_label: String,
    /// Resolution bandwidth of a spectrum, Hz.
    pub rbw: Option<f64>,
}

/// A sampled `(x, y)` series with strictly increasing `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    x: Vec<f64>,
    y: Vec<f64>,
    pub x_unit: XUnit,
    pub y_unit: YUnit,
    pub meta: TraceMeta,
}

impl Trace {
    pub fn new(x: Vec<f64>, y: Vec<f64>, x_unit: XUnit, y_unit: YUnit) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::invalid(
                "trace",
                format!("x has {} samples but y has {}", x.len(), y.len()),
            ));
        }
        if let Some(i) = x.iter().chain(&y).position(|v| !v.is_finite()) {
            return Err(Error::invalid("trace", format!("non-finite value at index {}", i % x.len().max(1))));
        }
        if let Some(i) = x.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "trace",
                format!("x not strictly increasing at index {}", i + 1),
            ));
        }
        Ok(Trace {
            x,
            y,
            x_unit,
            y_unit,
            meta: TraceMeta::default(),
        })
    }

    /// Evaluates `f` on a grid.
    pub fn from_fn(grid: &[f64], x_unit: XUnit, y_unit: YUnit, f: impl Fn(f64) -> f64) -> Result<Self> {
        let y = grid.iter().map(|&x| f(x)).collect();
        Trace::new(grid.to_vec(), y, x_unit, y_unit)
    }

    pub fn with_meta(mut self, meta: TraceMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Copy with values replaced; `y` must have the same length.
    pub fn map_y(&self, mut f: impl FnMut(f64, f64) -> f64) -> Trace {
        let y = self.x.iter().zip(&self.y).map(|(&x, &y)| f(x, y)).collect();
        Trace {
            x: self.x.clone(),
            y,
            x_unit: self.x_unit,
            y_unit: self.y_unit,
            meta: self.meta.clone(),
        }
    }

    /// Linear power values converted to dB. Non-positive values are rejected.
    pub fn to_db(&self) -> Result<Trace> {
        if self.y_unit != YUnit::Linear {
            return Err(Error::invalid("trace", format!("expected linear values, found `{}`", self.y_unit.as_str())));
        }
        if let Some(v) = self.y.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::invalid("trace", format!("cannot take dB of {v}")));
        }
        let mut t = self.map_y(|_, y| 10.0 * y.log10());
        t.y_unit = YUnit::Db;
        Ok(t)
    }

    /// Copy with independent Gaussian noise of standard deviation `sigma`
    /// added to every value, drawn from a generator seeded with `seed`.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Result<Trace> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid("sigma", format!("must be >= 0 (got {sigma})")));
        }
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid("sigma", e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.map_y(|_, y| y + normal.sample(&mut rng)))
    }

    /// Trapezoidal integral of `y` over `x`.
    pub fn integrate(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.y.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Sub-trace with `lo <= x <= hi`.
    pub fn window(&self, lo: f64, hi: f64) -> Trace {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .x
            .iter()
            .zip(&self.y)
            .filter(|(&x, _)| x >= lo && x <= hi)
            .map(|(&x, &y)| (x, y))
            .unzip();
        Trace {
            x,
            y,
            x_unit: self.x_unit,
            y_unit: self.y_unit,
            meta: self.meta.clone(),
        }
    }
}

/// `n` evenly spaced points from `start` to `stop` inclusive.
pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (stop - start) / (n - 1) as f64;
            (0..n).map(|i| start + step * i as f64).collect()
        }
    }
}

/// `n` logarithmically spaced points from `start` to `stop` inclusive.
pub fn logspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    linspace(start.ln(), stop.ln(), n)
        .into_iter()
        .map(f64::exp)
        .collect()
}
