//! One-parameter sweeps over the closed-form model.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{dbm_to_watts, DeviceFile};
use crate::model::{self, DeviceParams, PumpState};
use crate::spectrum::MechanicalMode;
use crate::swap::{self, QubitConfig};
use crate::trace::{linspace, logspace};

/// Parameter paths accepted by [`SweepSpec::path`].
pub const PATHS: [&str; 19] = [
    "device.f_o",
    "device.kappa_o",
    "device.kappa_oe",
    "device.f_m",
    "device.gamma_mi",
    "device.gamma_me",
    "device.g_om",
    "device.eta_oc",
    "device.c_idt",
    "device.z0",
    "pump.n_c",
    "pump.power_w",
    "pump.power_dbm",
    "pump.detuning",
    "qubit.c_q",
    "qubit.f_mu",
    "qubit.kappa_mu",
    "drive.p_mu",
    "temperature",
];

/// Output quantities accepted by [`SweepSpec::quantities`].
pub const QUANTITIES: [&str; 15] = [
    "n_c",
    "c_om",
    "gamma_om",
    "gamma_tot",
    "eta_o",
    "eta_em",
    "eta_tot",
    "n_th",
    "n_coh",
    "coherent_area",
    "z_q",
    "g_em",
    "threshold_gamma",
    "c_em",
    "gamma_me",
];

#[derive(Debug, Clone, PartialEq)]
pub enum SweepValues {
    List(Vec<f64>),
    Linear { start: f64, stop: f64, count: usize },
    Log { start: f64, stop: f64, count: usize },
}

impl SweepValues {
    pub fn values(&self) -> Result<Vec<f64>> {
        match *self {
            SweepValues::List(ref v) => {
                if v.is_empty() {
                    return Err(Error::Empty("sweep value list".into()));
                }
                Ok(v.clone())
            }
            SweepValues::Linear { start, stop, count } | SweepValues::Log { start, stop, count } => {
                if count == 0 {
                    return Err(Error::invalid("count", "must be >= 1"));
                }
                if !(start < stop) {
                    return Err(Error::invalid("range", format!("start ({start}) must be below stop ({stop})")));
                }
                if matches!(self, SweepValues::Log { .. }) {
                    if !(start > 0.0) {
                        return Err(Error::invalid("range", "log range needs start > 0"));
                    }
                    Ok(logspace(start, stop, count))
                } else {
                    Ok(linspace(start, stop, count))
                }
            }
        }
    }

    /// Parses `a,b,c` or `start:stop:count[:lin|log]`.
    pub fn parse(s: &str) -> Result<Self> {
        let num = |t: &str| -> Result<f64> {
            t.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("sweep value `{t}` is not a number")))
        };
        if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            if !(3..=4).contains(&parts.len()) {
                return Err(Error::Parse(format!("range `{s}` must be start:stop:count[:lin|log]")));
            }
            let (start, stop) = (num(parts[0])?, num(parts[1])?);
            let count = parts[2]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("range count `{}` is not an integer", parts[2])))?;
            match parts.get(3).map(|t| t.trim()) {
                None | Some("lin") | Some("linear") => Ok(SweepValues::Linear { start, stop, count }),
                Some("log") => Ok(SweepValues::Log { start, stop, count }),
                Some(other) => Err(Error::Parse(format!("range scale `{other}` must be lin or log"))),
            }
        } else {
            Ok(SweepValues::List(s.split(',').map(num).collect::<Result<_>>()?))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub path: String,
    pub values: SweepValues,
    pub quantities: Vec<String>,
    /// When sweeping `device.c_idt`, adjust `qubit.c_q` to keep `C_IDT + C_q`
    /// and therefore `Z_q` fixed.
    pub hold_z_q: bool,
    /// When sweeping `device.c_idt`, scale `γ_me` in proportion to `C_IDT`.
    pub scale_gamma_me: bool,
}

impl SweepSpec {
    pub fn new(path: &str, values: SweepValues, quantities: &[&str]) -> Self {
        SweepSpec {
            path: path.to_string(),
            values,
            quantities: quantities.iter().map(|q| q.to_string()).collect(),
            hold_z_q: false,
            scale_gamma_me: false,
        }
    }
}

/// Fixed inputs a sweep varies one of.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepContext {
    pub device: DeviceParams,
    pub pump: PumpState,
    pub qubit: QubitConfig,
    /// Microwave drive power for coherent-phonon quantities, W.
    pub p_mu: f64,
    /// Bath temperature, K.
    pub temperature: f64,
}

impl SweepContext {
    /// Context from a device file, defaulting to a blue pump at −7.9 dBm, a
    /// 70 fF transmon, a 6.3 µW drive and 300 K.
    pub fn from_file(file: &DeviceFile) -> Result<Self> {
        let device = file.device;
        let pump = match &file.pump {
            Some(p) => p.state(&device)?,
            None => PumpState::from_power(&device, device.f_m(), dbm_to_watts(-7.9))?,
        };
        Ok(SweepContext {
            device,
            pump,
            qubit: file.qubit.unwrap_or_else(|| QubitConfig::transmon_for(&device)),
            p_mu: 6.3e-6,
            temperature: 300.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    /// Swept path followed by the quantity names.
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SweepTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut write = || -> csv::Result<()> {
            w.write_record(&self.columns)?;
            for r in &self.rows {
                w.write_record(r.iter().map(|v| format!("{v:e}")))?;
            }
            Ok(())
        };
        write().expect("writing to memory cannot fail");
        String::from_utf8(w.into_inner().expect("in-memory buffer")).expect("ascii output")
    }
}

impl std::fmt::Display for SweepTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.columns.join("\t"));
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.6e}")).collect();
            let _ = writeln!(s, "{}", cells.join("\t"));
        }
        f.write_str(&s)
    }
}

fn check(spec: &SweepSpec) -> Result<Vec<f64>> {
    let mut errs = Vec::new();
    if !PATHS.contains(&spec.path.as_str()) {
        errs.push(format!("unknown sweep parameter `{}` (known: {})", spec.path, PATHS.join(", ")));
    }
    if spec.quantities.is_empty() {
        errs.push("no output quantities requested".into());
    }
    for q in &spec.quantities {
        if !QUANTITIES.contains(&q.as_str()) {
            errs.push(format!("unknown quantity `{q}` (known: {})", QUANTITIES.join(", ")));
        }
    }
    if (spec.hold_z_q || spec.scale_gamma_me) && spec.path != "device.c_idt" {
        errs.push("hold_z_q and scale_gamma_me only apply to a device.c_idt sweep".into());
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    spec.values.values()
}

/// Evaluates every quantity at every value, in parallel. Row order follows
/// the value order.
pub fn run_sweep(spec: &SweepSpec, ctx: &SweepContext) -> Result<SweepTable> {
    let values = check(spec)?;
    let rows = values
        .par_iter()
        .map(|&v| row(spec, ctx, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(table(spec, rows))
}

/// Serial reference for [`run_sweep`].
pub fn run_sweep_serial(spec: &SweepSpec, ctx: &SweepContext) -> Result<SweepTable> {
    let values = check(spec)?;
    let rows = values.iter().map(|&v| row(spec, ctx, v)).collect::<Result<Vec<_>>>()?;
    Ok(table(spec, rows))
}

fn table(spec: &SweepSpec, rows: Vec<Vec<f64>>) -> SweepTable {
    let mut columns = vec![spec.path.clone()];
    columns.extend(spec.quantities.iter().cloned());
    SweepTable { columns, rows }
}

fn apply(spec: &SweepSpec, ctx: &SweepContext, v: f64) -> Result<SweepContext> {
    let mut c = ctx.clone();
    let field = spec.path.split_once('.').map(|(_, f)| f);
    match spec.path.split('.').next() {
        Some("device") => {
            let base = ctx.device.values();
            c.device = ctx.device.with(|d| match field.unwrap_or("") {
                "f_o" => d.f_o = v,
                "kappa_o" => d.kappa_o = v,
                "kappa_oe" => d.kappa_oe = v,
                "f_m" => d.f_m = v,
                "gamma_mi" => d.gamma_mi = v,
                "gamma_me" => d.gamma_me = v,
                "g_om" => d.g_om = v,
                "eta_oc" => d.eta_oc = v,
                "c_idt" => {
                    d.c_idt = v;
                    if spec.scale_gamma_me && base.c_idt > 0.0 {
                        d.gamma_me = base.gamma_me * v / base.c_idt;
                    }
                }
                "z0" => d.z0 = v,
                _ => unreachable!("path checked"),
            })?;
            if spec.scale_gamma_me && base.c_idt <= 0.0 {
                return Err(Error::invalid("scale_gamma_me", "needs a base C_IDT > 0"));
            }
            if spec.hold_z_q {
                c.qubit.c_q = ctx.qubit.c_q + base.c_idt - v;
                if !(c.qubit.c_q > 0.0) {
                    return Err(Error::invalid("hold_z_q", format!("C_IDT = {v:e} F leaves no qubit capacitance")));
                }
            }
            // A pump given by power keeps its power; its photon number follows.
            if let Some(p) = ctx.pump.p_on_chip {
                c.pump = PumpState::from_power(&c.device, ctx.pump.detuning, p)?;
            }
        }
        Some("pump") => {
            c.pump = match field.unwrap_or("") {
                "n_c" => PumpState::from_photon_number(ctx.pump.detuning, v)?,
                "power_w" => PumpState::from_power(&ctx.device, ctx.pump.detuning, v)?,
                "power_dbm" => PumpState::from_power(&ctx.device, ctx.pump.detuning, dbm_to_watts(v))?,
                "detuning" => match ctx.pump.p_on_chip {
                    Some(p) => PumpState::from_power(&ctx.device, v, p)?,
                    None => PumpState::from_photon_number(v, ctx.pump.n_c)?,
                },
                _ => unreachable!("path checked"),
            }
        }
        Some("qubit") => {
            match field.unwrap_or("") {
                "c_q" => c.qubit.c_q = v,
                "f_mu" => c.qubit.f_mu = v,
                "kappa_mu" => c.qubit.kappa_mu = v,
                _ => unreachable!("path checked"),
            }
            let errs = c.qubit.violations();
            if !errs.is_empty() {
                return Err(Error::Validation(errs));
            }
        }
        Some("drive") => {
            if !(v >= 0.0) {
                return Err(Error::invalid("p_mu", "must be >= 0"));
            }
            c.p_mu = v;
        }
        Some("temperature") => c.temperature = v,
        _ => unreachable!("path checked"),
    }
    Ok(c)
}

fn row(spec: &SweepSpec, ctx: &SweepContext, v: f64) -> Result<Vec<f64>> {
    let c = apply(spec, ctx, v)?;
    let d = &c.device;
    let sideband = c.pump.sideband();
    let mut out = vec![v];
    for q in &spec.quantities {
        let x = match q.as_str() {
            "n_c" => c.pump.n_c,
            "c_om" => model::cooperativity(d, c.pump.n_c, d.gamma_mi())?,
            "gamma_om" => model::backaction_rate(d, c.pump.n_c)?,
            "gamma_tot" => model::total_mech_linewidth(d, c.pump.n_c, sideband)?,
            "eta_o" => model::efficiencies(d, d.gamma_mi())?.0,
            "eta_em" => model::efficiencies(d, d.gamma_mi())?.1,
            "eta_tot" => model::total_efficiency(d, &c.pump, sideband)?,
            "n_th" => model::thermal_occupation(d.f_m(), c.temperature)?,
            "n_coh" | "coherent_area" => {
                let m = MechanicalMode::principal(d);
                let n_coh = m.coherent_phonons(m.f, c.p_mu);
                if q == "n_coh" {
                    n_coh
                } else {
                    n_coh * m.scattering_rate(c.pump.n_c, d.kappa_o())
                }
            }
            "z_q" => swap::qubit_impedance(&c.qubit, d),
            "g_em" => swap::coupling_g_em(d, &c.qubit),
            "threshold_gamma" => swap::swap_feasibility(d, &c.qubit)?.threshold_gamma,
            "c_em" => swap::swap_feasibility(d, &c.qubit)?.c_em,
            "gamma_me" => d.gamma_me(),
            _ => unreachable!("quantity checked"),
        };
        out.push(x);
    }
    Ok(out)
}
