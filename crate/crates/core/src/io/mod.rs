//! Device files, trace CSV files and parameter sweeps.
//!
//! Powers enter the toolkit here, in dBm or W; everything past this layer
//! works in W.

mod device;
mod sweep;
mod tracefile;

pub use device::{
    bundled_device, load_device, parse_device, write_device, DeviceFile, PumpPower, PumpSpec, BUNDLED, DEVICE_PATH_ENV,
};
pub use sweep::{run_sweep, run_sweep_serial, SweepContext, SweepSpec, SweepTable, SweepValues, PATHS, QUANTITIES};
pub use tracefile::{read_trace, read_trace_file, write_trace, write_trace_file};

use crate::error::{Error, Result};

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * (w / 1e-3).log10()
}

/// Parses a power such as `-7.9dbm`, `-7.9 dBm`, `1.6e-4w` or `1.6e-4 W`.
pub fn parse_power(s: &str) -> Result<f64> {
    let t = s.trim().to_ascii_lowercase();
    let (num, dbm) = if let Some(n) = t.strip_suffix("dbm") {
        (n, true)
    } else if let Some(n) = t.strip_suffix('w') {
        (n, false)
    } else {
        return Err(Error::Parse(format!("power `{s}` needs a `dbm` or `w` unit")));
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("power `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("power `{s}` is not finite")));
    }
    if dbm {
        Ok(dbm_to_watts(v))
    } else if v < 0.0 {
        Err(Error::Parse(format!("power `{s}` is negative")))
    } else {
        Ok(v)
    }
}
