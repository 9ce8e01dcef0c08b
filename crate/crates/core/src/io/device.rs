//! TOML-syntax device files.
//!
//! ```toml
//! [optical]
//! f_o_hz = 194.9e12
//! kappa_o_hz = 2.1e9
//! kappa_oe_hz = 0.99e9
//! eta_oc = 0.29
//!
//! [mechanical]
//! f_m_hz = 4.32e9
//! gamma_mi_hz = 8.4e6
//! g_om_hz = 130e3
//!
//! [electromechanical]
//! gamma_me_hz = 58
//! c_idt_f = 0.42e-15
//! z0_ohm = 50
//! ```
//!
//! Optional sections: `[pump]` (`detuning_hz`, `power_dbm` or `power_w`,
//! `n_c`), `[qubit]` (`c_q_f`, `f_mu_hz`, `kappa_mu_hz`) and repeated
//! `[[modes]]` blocks (`f_hz`, `gamma_hz`, `g_hz`, `phi_rad`, `gamma_e_hz`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::io::dbm_to_watts;
use crate::model::{DeviceParams, DeviceValues, PumpState};
use crate::spectrum::MechanicalMode;
use crate::swap::QubitConfig;

/// Colon-separated directories searched by [`load_device`].
pub const DEVICE_PATH_ENV: &str = "OMTX_DEVICE_PATH";

/// Device files shipped with the crate: the measured device and the two
/// simulated designs.
pub const BUNDLED: [(&str, &str); 3] = [
    ("table1_measured", include_str!("../../devices/table1_measured.cfg")),
    ("table1_sim_adj", include_str!("../../devices/table1_sim_adj.cfg")),
    ("table1_sim_init", include_str!("../../devices/table1_sim_init.cfg")),
];

const SUFFIXES: [&str; 6] = ["_hz", "_dbm", "_w", "_f", "_ohm", "_rad"];

/// Pump power as written in the file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PumpPower {
    Dbm(f64),
    Watts(f64),
}

impl PumpPower {
    pub fn watts(self) -> f64 {
        match self {
            PumpPower::Dbm(d) => dbm_to_watts(d),
            PumpPower::Watts(w) => w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpSpec {
    pub detuning: f64,
    pub power: Option<PumpPower>,
    pub n_c: Option<f64>,
}

impl PumpSpec {
    pub fn state(&self, dev: &DeviceParams) -> Result<PumpState> {
        match (self.power, self.n_c) {
            (Some(p), Some(n)) => PumpState::with_both(dev, self.detuning, p.watts(), n),
            (Some(p), None) => PumpState::from_power(dev, self.detuning, p.watts()),
            (None, Some(n)) => PumpState::from_photon_number(self.detuning, n),
            (None, None) => Err(Error::invalid("pump", "needs power_dbm, power_w or n_c")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceFile {
    pub device: DeviceParams,
    pub modes: Vec<MechanicalMode>,
    pub pump: Option<PumpSpec>,
    pub qubit: Option<QubitConfig>,
}

impl DeviceFile {
    pub fn new(device: DeviceParams) -> Self {
        DeviceFile {
            device,
            modes: Vec::new(),
            pump: None,
            qubit: None,
        }
    }

    /// Declared modes, or the device's principal mode when none are listed.
    pub fn modes_or_principal(&self) -> Vec<MechanicalMode> {
        if self.modes.is_empty() {
            vec![MechanicalMode::principal(&self.device)]
        } else {
            self.modes.clone()
        }
    }
}

fn strip_suffix(key: &str) -> &str {
    SUFFIXES
        .iter()
        .find_map(|s| key.strip_suffix(s))
        .unwrap_or(key)
}

/// Reads the numeric keys of one section, recording every problem.
struct Section<'a> {
    name: String,
    table: Option<&'a Table>,
    allowed: &'static [&'static str],
    errors: &'a mut Vec<String>,
}

impl<'a> Section<'a> {
    fn new(name: impl Into<String>, value: Option<&'a Value>, allowed: &'static [&'static str], errors: &'a mut Vec<String>) -> Self {
        let name = name.into();
        let table = match value {
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                errors.push(format!("[{name}] must be a table"));
                None
            }
            None => None,
        };
        let mut s = Section { name, table, allowed, errors };
        s.check_keys();
        s
    }

    fn check_keys(&mut self) {
        let Some(t) = self.table else { return };
        let mut found = Vec::new();
        for key in t.keys() {
            if self.allowed.contains(&key.as_str()) {
                continue;
            }
            let hint = self
                .allowed
                .iter()
                .find(|a| strip_suffix(a) == strip_suffix(key) && strip_suffix(a) != **a);
            found.push(match hint {
                Some(a) if strip_suffix(key) == key => {
                    format!("[{}] key `{key}` lacks a unit suffix (expected `{a}`)", self.name)
                }
                Some(a) => format!("[{}] key `{key}` has the wrong unit suffix (expected `{a}`)", self.name),
                None => format!("[{}] unknown key `{key}`", self.name),
            });
        }
        self.errors.extend(found);
    }

    fn present(&self) -> bool {
        self.table.is_some()
    }

    fn has(&self, key: &str) -> bool {
        self.table.is_some_and(|t| t.contains_key(key))
    }

    fn opt(&mut self, key: &str) -> Option<f64> {
        let v = self.table?.get(key)?;
        match v {
            Value::Float(f) if f.is_finite() => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.errors.push(format!("[{}] `{key}` must be a finite number", self.name));
                None
            }
        }
    }

    fn req(&mut self, key: &str) -> f64 {
        if self.table.is_some() && !self.has(key) {
            self.errors.push(format!("[{}] missing key `{key}`", self.name));
            return f64::NAN;
        }
        self.opt(key).unwrap_or(f64::NAN)
    }
}

/// Parses a device file, reporting every problem found.
///
/// Unknown keys, missing keys and unit-suffix mistakes are [`Error::Parse`];
/// physically invalid values are [`Error::Validation`].
pub fn parse_device(text: &str) -> Result<DeviceFile> {
    let doc: Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    let mut errors = Vec::new();
    for (k, v) in &doc {
        match (k.as_str(), v) {
            ("optical" | "mechanical" | "electromechanical" | "pump" | "qubit", _) | ("modes", _) => {}
            (other, Value::Table(_)) => errors.push(format!("unknown section [{other}]")),
            (other, _) => errors.push(format!("top-level key `{other}` must belong to a section")),
        }
    }
    for s in ["optical", "mechanical", "electromechanical"] {
        if !doc.contains_key(s) {
            errors.push(format!("missing section [{s}]"));
        }
    }

    let mut o = Section::new("optical", doc.get("optical"), &["f_o_hz", "kappa_o_hz", "kappa_oe_hz", "eta_oc"], &mut errors);
    let (f_o, kappa_o, kappa_oe, eta_oc) = (o.req("f_o_hz"), o.req("kappa_o_hz"), o.req("kappa_oe_hz"), o.req("eta_oc"));
    let mut m = Section::new("mechanical", doc.get("mechanical"), &["f_m_hz", "gamma_mi_hz", "g_om_hz"], &mut errors);
    let (f_m, gamma_mi, g_om) = (m.req("f_m_hz"), m.req("gamma_mi_hz"), m.req("g_om_hz"));
    let mut e = Section::new(
        "electromechanical",
        doc.get("electromechanical"),
        &["gamma_me_hz", "c_idt_f", "z0_ohm"],
        &mut errors,
    );
    let (gamma_me, c_idt, z0) = (e.req("gamma_me_hz"), e.req("c_idt_f"), e.req("z0_ohm"));

    let mut p = Section::new("pump", doc.get("pump"), &["detuning_hz", "power_dbm", "power_w", "n_c"], &mut errors);
    let pump = if p.present() {
        let detuning = p.req("detuning_hz");
        let power = match (p.opt("power_dbm"), p.opt("power_w")) {
            (Some(_), Some(_)) => {
                p.errors.push("[pump] give only one of `power_dbm` and `power_w`".into());
                None
            }
            (Some(d), None) => Some(PumpPower::Dbm(d)),
            (None, Some(w)) => Some(PumpPower::Watts(w)),
            (None, None) => None,
        };
        let n_c = p.opt("n_c");
        if power.is_none() && n_c.is_none() && !(p.has("power_dbm") || p.has("power_w") || p.has("n_c")) {
            p.errors.push("[pump] needs `power_dbm`, `power_w` or `n_c`".into());
        }
        Some(PumpSpec { detuning, power, n_c })
    } else {
        None
    };

    let mut q = Section::new("qubit", doc.get("qubit"), &["c_q_f", "f_mu_hz", "kappa_mu_hz"], &mut errors);
    let qubit = q.present().then(|| QubitConfig {
        c_q: q.req("c_q_f"),
        f_mu: q.req("f_mu_hz"),
        kappa_mu: q.req("kappa_mu_hz"),
    });

    let mut modes = Vec::new();
    match doc.get("modes") {
        None => {}
        Some(Value::Array(blocks)) => {
            for (k, block) in blocks.iter().enumerate() {
                let mut s = Section::new(
                    format!("modes.{}", k + 1),
                    Some(block),
                    &["f_hz", "gamma_hz", "g_hz", "phi_rad", "gamma_e_hz"],
                    &mut errors,
                );
                let mode = MechanicalMode {
                    f: s.req("f_hz"),
                    gamma: s.req("gamma_hz"),
                    g: s.req("g_hz"),
                    phi: s.opt("phi_rad").unwrap_or(0.0),
                    gamma_e: s.req("gamma_e_hz"),
                };
                modes.push(mode);
            }
        }
        Some(_) => errors.push("`modes` must be written as [[modes]] blocks".into()),
    }
    if !errors.is_empty() {
        return Err(Error::Parse(errors.join("\n")));
    }

    let values = DeviceValues {
        f_o,
        kappa_o,
        kappa_oe,
        f_m,
        gamma_mi,
        gamma_me,
        g_om,
        eta_oc,
        c_idt,
        z0,
    };
    let mut violations = values.violations();
    for (k, mode) in modes.iter_mut().enumerate() {
        mode.phi = mode.phi.rem_euclid(std::f64::consts::TAU);
        violations.extend(mode.violations().into_iter().map(|v| format!("[[modes]] #{}: {v}", k + 1)));
    }
    if let Some(q) = &qubit {
        violations.extend(q.violations().into_iter().map(|v| format!("[qubit] {v}")));
    }
    if let Some(p) = &pump {
        if !p.detuning.is_finite() {
            violations.push("[pump] detuning_hz must be finite".into());
        }
        if let Some(PumpPower::Watts(w)) = p.power {
            if w < 0.0 {
                violations.push(format!("[pump] power_w must be >= 0 (got {w})"));
            }
        }
        if p.n_c.is_some_and(|n| n < 0.0) {
            violations.push("[pump] n_c must be >= 0".into());
        }
    }
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let device = DeviceParams::new(values)?;
    if let Some(p) = &pump {
        if p.power.is_some() && p.n_c.is_some() {
            p.state(&device)?;
        }
    }
    Ok(DeviceFile {
        device,
        modes,
        pump,
        qubit,
    })
}

/// Serialises a device file; [`parse_device`] reads it back exactly.
pub fn write_device(file: &DeviceFile) -> String {
    let v = file.device.values();
    let mut s = String::new();
    let _ = writeln!(s, "[optical]");
    let _ = writeln!(s, "f_o_hz = {:e}", v.f_o);
    let _ = writeln!(s, "kappa_o_hz = {:e}", v.kappa_o);
    let _ = writeln!(s, "kappa_oe_hz = {:e}", v.kappa_oe);
    let _ = writeln!(s, "eta_oc = {:e}", v.eta_oc);
    let _ = writeln!(s, "\n[mechanical]");
    let _ = writeln!(s, "f_m_hz = {:e}", v.f_m);
    let _ = writeln!(s, "gamma_mi_hz = {:e}", v.gamma_mi);
    let _ = writeln!(s, "g_om_hz = {:e}", v.g_om);
    let _ = writeln!(s, "\n[electromechanical]");
    let _ = writeln!(s, "gamma_me_hz = {:e}", v.gamma_me);
    let _ = writeln!(s, "c_idt_f = {:e}", v.c_idt);
    let _ = writeln!(s, "z0_ohm = {:e}", v.z0);
    if let Some(p) = &file.pump {
        let _ = writeln!(s, "\n[pump]");
        let _ = writeln!(s, "detuning_hz = {:e}", p.detuning);
        match p.power {
            Some(PumpPower::Dbm(d)) => {
                let _ = writeln!(s, "power_dbm = {d:e}");
            }
            Some(PumpPower::Watts(w)) => {
                let _ = writeln!(s, "power_w = {w:e}");
            }
            None => {}
        }
        if let Some(n) = p.n_c {
            let _ = writeln!(s, "n_c = {n:e}");
        }
    }
    if let Some(q) = &file.qubit {
        let _ = writeln!(s, "\n[qubit]");
        let _ = writeln!(s, "c_q_f = {:e}", q.c_q);
        let _ = writeln!(s, "f_mu_hz = {:e}", q.f_mu);
        let _ = writeln!(s, "kappa_mu_hz = {:e}", q.kappa_mu);
    }
    for m in &file.modes {
        let _ = writeln!(s, "\n[[modes]]");
        let _ = writeln!(s, "f_hz = {:e}", m.f);
        let _ = writeln!(s, "gamma_hz = {:e}", m.gamma);
        let _ = writeln!(s, "g_hz = {:e}", m.g);
        let _ = writeln!(s, "phi_rad = {:e}", m.phi);
        let _ = writeln!(s, "gamma_e_hz = {:e}", m.gamma_e);
    }
    s
}

/// A bundled device by name, with or without the `.cfg` extension.
pub fn bundled_device(name: &str) -> Option<DeviceFile> {
    let stem = name.strip_suffix(".cfg").unwrap_or(name);
    BUNDLED
        .iter()
        .find(|(n, _)| *n == stem)
        .map(|(_, text)| parse_device(text).expect("bundled device files are valid"))
}

fn candidates(spec: &str) -> Vec<PathBuf> {
    let mut out = vec![PathBuf::from(spec)];
    if let Some(dirs) = std::env::var_os(DEVICE_PATH_ENV) {
        for dir in std::env::split_paths(&dirs) {
            out.push(dir.join(spec));
            out.push(dir.join(format!("{spec}.cfg")));
        }
    }
    out
}

/// Loads a device by path, then from the directories in
/// `OMTX_DEVICE_PATH`, then from the bundled files.
pub fn load_device(spec: &str) -> Result<DeviceFile> {
    for path in candidates(spec) {
        if path.is_file() {
            return read_device_file(&path);
        }
    }
    let stem = Path::new(spec).file_name().and_then(|s| s.to_str()).unwrap_or(spec);
    bundled_device(stem).ok_or_else(|| {
        let names: Vec<&str> = BUNDLED.iter().map(|(n, _)| *n).collect();
        Error::Io(format!("device `{spec}` not found (bundled: {})", names.join(", ")))
    })
}

fn read_device_file(path: &Path) -> Result<DeviceFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_device(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}
