#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use omtx::fit::{self, Background, CouplingBranch, FitResult};
use omtx::io::{self, DeviceFile, SweepContext, SweepSpec, SweepValues};
use omtx::link::{self, DriveMode, LinkConfig, RingKind, SquareWave};
use omtx::model::{self, PumpState, Sideband};
use omtx::spectrum::{self, CoherentDrive};
use omtx::swap::{self, QubitConfig};
use omtx::trace::{linspace, Trace, XUnit};
use omtx::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;

/// Simulation and analysis of piezo-optomechanical microwave-to-optical transducers.
#[derive(Parser)]
#[command(name = "omtx", version, arg_required_else_help = true)]
struct Cli {
    /// Seed for every stochastic path (noise, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the conversion efficiency chain and cooperativity.
    Efficiency(EfficiencyArgs),
    /// Synthesize a thermal, driven, scattering or harmonic spectrum as CSV.
    Spectrum(SpectrumArgs),
    /// Fit a model to trace files.
    Fit(FitArgs),
    /// Simulate bit transmission through the mechanical mode.
    Link(LinkArgs),
    /// Report qubit-to-mechanics swap feasibility.
    Swap(SwapArgs),
    /// Sweep one parameter and tabulate derived quantities.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct DeviceArgs {
    /// Device file path, name in OMTX_DEVICE_PATH, or bundled device name.
    #[arg(long, default_value = "table1_measured")]
    device: String,
}

#[derive(Args, Clone)]
struct PumpArgs {
    /// On-chip pump power, e.g. `-7.9dbm` or `1.6e-4w`.
    #[arg(long, allow_hyphen_values = true)]
    power: Option<String>,
    /// Intracavity photon number.
    #[arg(long)]
    n_c: Option<f64>,
    /// `blue`, `red`, or a detuning in Hz (positive is blue).
    #[arg(long, allow_hyphen_values = true)]
    detuning: Option<String>,
}

#[derive(Args)]
struct EfficiencyArgs {
    #[command(flatten)]
    device: DeviceArgs,
    #[command(flatten)]
    pump: PumpArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpectrumKind {
    Thermal,
    Driven,
    Soe,
    Harmonic,
}

#[derive(Args)]
struct SpectrumArgs {
    kind: SpectrumKind,
    #[command(flatten)]
    device: DeviceArgs,
    #[command(flatten)]
    pump: PumpArgs,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid start, Hz. Defaults to the mechanical frequency minus 20 linewidths.
    #[arg(long)]
    start: Option<f64>,
    /// Grid stop, Hz.
    #[arg(long)]
    stop: Option<f64>,
    #[arg(long, default_value_t = 2001)]
    points: usize,
    /// Bath temperature, K.
    #[arg(long, default_value_t = 300.0)]
    temperature: f64,
    /// Microwave drive power for `driven`, e.g. `6.3e-6w`.
    #[arg(long, default_value = "6.3e-6w", allow_hyphen_values = true)]
    p_mu: String,
    /// Drive tone offset from the mechanical frequency, Hz.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    drive_offset: f64,
    /// Analyzer resolution bandwidth, Hz.
    #[arg(long, default_value_t = 1e5)]
    rbw: f64,
    /// Additive Gaussian noise relative to the spectrum maximum.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Report |S_oe|² in dB instead of linear.
    #[arg(long)]
    db: bool,
    /// Square-wave frequency for `harmonic`, Hz.
    #[arg(long, default_value_t = 0.5e6)]
    f0: f64,
    /// Mechanical linewidth for `harmonic`, Hz; the device's when omitted.
    #[arg(long)]
    gamma_m: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Under,
    Over,
}

#[derive(Clone, Copy, ValueEnum)]
enum SidebandArg {
    Blue,
    Red,
}

#[derive(Args)]
struct FitArgs {
    #[command(subcommand)]
    kind: FitKind,
}

#[derive(Subcommand)]
enum FitKind {
    /// Optical reflection dip: f_o, κ_o, κ_oe, κ_oi.
    Dip {
        trace: PathBuf,
        #[arg(long, value_enum, default_value = "under")]
        branch: BranchArg,
    },
    /// Pump detuning from sideband magnitude and phase traces.
    Phase {
        magnitude: PathBuf,
        phase: PathBuf,
        #[command(flatten)]
        device: DeviceArgs,
    },
    /// g_om and γ_m,i from linewidth against photon number (x: n_c, y: Hz).
    Linewidth {
        points: PathBuf,
        #[arg(long, value_enum, default_value = "blue")]
        sideband: SidebandArg,
        #[command(flatten)]
        device: DeviceArgs,
    },
    /// Sum of Lorentzian peaks over a background.
    Lorentz {
        trace: PathBuf,
        #[arg(long, default_value_t = 1)]
        peaks: usize,
        /// `constant`, `linear`, or a reference trace file to subtract.
        #[arg(long, default_value = "constant")]
        background: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DriveArg {
    Coherent,
    Thermal,
}

#[derive(Args)]
struct LinkArgs {
    /// Bit string such as `0101`.
    #[arg(long, conflicts_with = "bits_file")]
    bits: Option<String>,
    /// File holding the bit string.
    #[arg(long)]
    bits_file: Option<PathBuf>,
    /// Bit rate, bit/s.
    #[arg(long)]
    rate: f64,
    /// Mechanical linewidth in operation, Hz.
    #[arg(long, default_value_t = 7.9e6)]
    gamma_m: f64,
    /// Noise per quadrature, V.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Intermediate frequency, Hz.
    #[arg(long, default_value_t = 50e6)]
    f_if: f64,
    /// Settled envelope amplitude, V.
    #[arg(long, default_value_t = 1.0)]
    v0: f64,
    /// Samples per bit; the smallest valid value when omitted.
    #[arg(long)]
    samples_per_bit: Option<usize>,
    #[arg(long, value_enum, default_value = "coherent")]
    drive: DriveArg,
    /// Envelope CSV output.
    #[arg(long)]
    envelope_out: Option<PathBuf>,
    /// Eye diagram CSV output.
    #[arg(long)]
    eye_out: Option<PathBuf>,
}

#[derive(Args)]
struct SwapArgs {
    #[command(flatten)]
    device: DeviceArgs,
    /// Qubit capacitance, F.
    #[arg(long)]
    c_q: Option<f64>,
    /// Qubit frequency, Hz.
    #[arg(long)]
    f_mu: Option<f64>,
    /// Qubit linewidth, Hz.
    #[arg(long)]
    kappa_mu: Option<f64>,
    /// Override the intrinsic mechanical linewidth, Hz.
    #[arg(long)]
    gamma_mi: Option<f64>,
    /// Override the piezoelectric coupling rate γ_m,e, Hz.
    #[arg(long)]
    gamma_me: Option<f64>,
    /// Write the qubit/phonon exchange to this CSV.
    #[arg(long)]
    rabi_out: Option<PathBuf>,
    /// Exchange duration, s.
    #[arg(long, default_value_t = 2e-6)]
    duration: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    device: DeviceArgs,
    /// Parameter path such as `pump.n_c` or `device.c_idt`.
    #[arg(long)]
    param: String,
    /// `a,b,c` or `start:stop:n[:lin|log]`.
    #[arg(long, allow_hyphen_values = true)]
    values: String,
    /// Comma-separated quantities.
    #[arg(long, value_delimiter = ',', required = true)]
    quantity: Vec<String>,
    /// Compensate c_q to keep the qubit impedance fixed.
    #[arg(long)]
    hold_z_q: bool,
    /// Scale γ_m,e in proportion to c_idt.
    #[arg(long)]
    scale_gamma_me: bool,
    /// Microwave drive power, e.g. `6.3e-6w`.
    #[arg(long, allow_hyphen_values = true)]
    p_mu: Option<String>,
    /// Bath temperature, K.
    #[arg(long)]
    temperature: Option<f64>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::FitFailure(_) => EXIT_NO_CONVERGENCE,
            Error::Io(_) => EXIT_FAILURE,
            _ => EXIT_VALIDATION,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Efficiency(a) => efficiency(a),
        Command::Spectrum(a) => spectrum_cmd(a, cli.seed),
        Command::Fit(a) => fit_cmd(a),
        Command::Link(a) => link_cmd(a, cli.seed),
        Command::Swap(a) => swap_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn load(d: &DeviceArgs) -> CliResult<DeviceFile> {
    Ok(io::load_device(&d.device)?)
}

fn parse_detuning(s: &str, f_m: f64) -> CliResult<f64> {
    match s.to_ascii_lowercase().as_str() {
        "blue" => Ok(f_m),
        "red" => Ok(-f_m),
        other => other
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v != 0.0)
            .ok_or_else(|| usage(format!("--detuning: expected `blue`, `red` or a non-zero number of Hz, got `{s}`"))),
    }
}

/// Pump from the flags, falling back to the device file's pump section.
fn pump_state(file: &DeviceFile, p: &PumpArgs) -> CliResult<PumpState> {
    let dev = &file.device;
    let detuning = match (&p.detuning, &file.pump) {
        (Some(s), _) => parse_detuning(s, dev.f_m())?,
        (None, Some(spec)) => spec.detuning,
        (None, None) => dev.f_m(),
    };
    let power = p
        .power
        .as_deref()
        .map(|s| io::parse_power(s).map_err(|e| usage(format!("--power: {e}"))))
        .transpose()?;
    let state = match (power, p.n_c) {
        (Some(w), Some(n)) => PumpState::with_both(dev, detuning, w, n)?,
        (Some(w), None) => PumpState::from_power(dev, detuning, w)?,
        (None, Some(n)) => PumpState::from_photon_number(detuning, n)?,
        (None, None) => match &file.pump {
            Some(spec) => io::PumpSpec { detuning, ..*spec }.state(dev)?,
            None => return Err(usage("no pump given: pass --power or --n-c")),
        },
    };
    Ok(state)
}

fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure {
            code: EXIT_FAILURE,
            message: format!("{}: {e}", p.display()),
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn efficiency(a: EfficiencyArgs) -> CliResult<()> {
    let file = load(&a.device)?;
    let dev = &file.device;
    let pump = pump_state(&file, &a.pump)?;
    let c = model::efficiency_chain(dev, &pump, pump.sideband())?;
    println!("sideband = {}", c.sideband.as_str());
    println!("detuning_hz = {:.6e}", pump.detuning);
    if let Some(p) = pump.p_on_chip {
        println!("power_w = {:.6e}", p);
        println!("power_dbm = {:.3}", io::watts_to_dbm(p));
    }
    println!("n_c = {:.6e}", c.n_c);
    println!("eta_oc = {:.6e}", c.eta_oc);
    println!("eta_o = {:.6e}", c.eta_o);
    println!("eta_em = {:.6e}", c.eta_em);
    println!("c_om = {:.6e}", c.c_om);
    println!("gain = {:.6e}", c.gain);
    println!("gamma_om_hz = {:.6e}", c.gamma_om);
    println!("gamma_tot_hz = {:.6e}", c.gamma_tot);
    println!("eta_tot = {:.6e}", c.eta_tot);
    Ok(())
}

fn spectrum_cmd(a: SpectrumArgs, seed: u64) -> CliResult<()> {
    if a.points < 2 {
        return Err(usage("--points must be at least 2"));
    }
    let file = load(&a.device)?;
    let dev = &file.device;
    let modes = file.modes_or_principal();
    let span = |center: f64, half: f64| -> (f64, f64) {
        (a.start.unwrap_or(center - half), a.stop.unwrap_or(center + half))
    };
    let widest = modes.iter().map(|m| m.gamma).fold(0.0, f64::max);
    let lo_mode = modes.iter().map(|m| m.f).fold(f64::INFINITY, f64::min);
    let hi_mode = modes.iter().map(|m| m.f).fold(f64::NEG_INFINITY, f64::max);
    let (start, stop) = span(0.5 * (lo_mode + hi_mode), 0.5 * (hi_mode - lo_mode) + 20.0 * widest);
    if !(start < stop) {
        return Err(usage("--start must be below --stop"));
    }
    let grid = linspace(start, stop, a.points);

    let trace = match a.kind {
        SpectrumKind::Thermal | SpectrumKind::Driven => {
            let pump = pump_state(&file, &a.pump)?;
            let n_th = model::thermal_occupation(dev.f_m(), a.temperature)?;
            if matches!(a.kind, SpectrumKind::Thermal) {
                spectrum::thermal_spectrum(dev, &modes, pump.n_c, n_th, &grid)?
            } else {
                let p_mu = io::parse_power(&a.p_mu).map_err(|e| usage(format!("--p-mu: {e}")))?;
                let drive = CoherentDrive {
                    f: dev.f_m() + a.drive_offset,
                    p_mu,
                    rbw: a.rbw,
                };
                spectrum::driven_spectrum(dev, &modes, pump.n_c, n_th, drive, &grid)?
            }
        }
        SpectrumKind::Soe => {
            let pump = pump_state(&file, &a.pump)?;
            let s = spectrum::s_oe_spectrum(dev, &modes, &pump, &grid)?;
            if a.db {
                s.to_db()?
            } else {
                s
            }
        }
        SpectrumKind::Harmonic => {
            let gamma = a.gamma_m.unwrap_or(dev.gamma_mi());
            link::harmonic_spectrum(&SquareWave::new(a.f0, gamma, dev.f_m()))?
        }
    };
    let trace = if a.noise > 0.0 {
        let peak = trace.y().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        trace.with_noise(a.noise * peak, seed)?
    } else {
        trace
    };
    emit(a.out.as_deref(), &io::write_trace(&trace))
}

fn converged(result: &FitResult) -> CliResult<()> {
    if result.converged {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NO_CONVERGENCE,
            message: "fit did not converge".into(),
        })
    }
}

fn fit_cmd(a: FitArgs) -> CliResult<()> {
    match a.kind {
        FitKind::Dip { trace, branch } => {
            let t = io::read_trace_file(&trace)?;
            let branch = match branch {
                BranchArg::Under => CouplingBranch::Under,
                BranchArg::Over => CouplingBranch::Over,
            };
            let fit = fit::fit_optical_dip(&t, branch)?;
            print!("{}", fit.result);
            let f_o = fit.result.value("f_o");
            println!("q_oi = {:.6e}", f_o / fit.result.value("kappa_oi"));
            println!("alt_kappa_oe_hz = {:.6e}", match branch {
                CouplingBranch::Under => fit.over.kappa_oe,
                CouplingBranch::Over => fit.under.kappa_oe,
            });
            converged(&fit.result)
        }
        FitKind::Phase { magnitude, phase, device } => {
            let dev = load(&device)?.device;
            let mag = io::read_trace_file(&magnitude)?;
            let ph = io::read_trace_file(&phase)?;
            let r = fit::fit_phase_detuning(&mag, &ph, dev.kappa_o(), dev.kappa_oe())?;
            print!("{r}");
            converged(&r)
        }
        FitKind::Linewidth { points, sideband, device } => {
            let dev = load(&device)?.device;
            let t = io::read_trace_file(&points)?;
            let pts: Vec<(f64, f64)> = t.x().iter().copied().zip(t.y().iter().copied()).collect();
            let sb = match sideband {
                SidebandArg::Blue => Sideband::Blue,
                SidebandArg::Red => Sideband::Red,
            };
            let r = fit::fit_linewidth_vs_photons(&pts, sb, dev.kappa_o(), None)?;
            print!("{r}");
            converged(&r)
        }
        FitKind::Lorentz { trace, peaks, background } => {
            let t = io::read_trace_file(&trace)?;
            let bg = match background.as_str() {
                "constant" => Background::Constant,
                "linear" => Background::Linear,
                path => Background::FromReference(io::read_trace_file(path)?),
            };
            let fit = fit::fit_lorentzian_multi(&t, peaks, &bg)?;
            print!("{}", fit.result);
            for (k, p) in fit.peaks.iter().enumerate() {
                println!(
                    "peak_{} = center {:.9e} +/- {:.3e} hz, fwhm {:.6e} +/- {:.3e} hz, area {:.6e} +/- {:.3e}",
                    k + 1,
                    p.center,
                    p.center_se,
                    p.fwhm,
                    p.fwhm_se,
                    p.area,
                    p.area_se
                );
            }
            converged(&fit.result)
        }
    }
}

fn link_cmd(a: LinkArgs, seed: u64) -> CliResult<()> {
    let text = match (&a.bits, &a.bits_file) {
        (Some(b), _) => b.clone(),
        (None, Some(p)) => fs::read_to_string(p).map_err(|e| Failure {
            code: EXIT_FAILURE,
            message: format!("{}: {e}", p.display()),
        })?,
        (None, None) => return Err(usage("one of --bits or --bits-file is required")),
    };
    let bits = link::parse_bits(&text)?;
    let mut cfg = LinkConfig::new(bits, a.rate, a.gamma_m);
    cfg.noise_rms = a.noise;
    cfg.f_if = a.f_if;
    cfg.v0 = a.v0;
    cfg.drive = match a.drive {
        DriveArg::Coherent => DriveMode::Coherent,
        DriveArg::Thermal => DriveMode::ThermalBath,
    };
    if let Some(spb) = a.samples_per_bit {
        cfg.samples_per_bit = spb;
    }
    let run = link::run_link(&cfg, seed)?;
    if let Some(p) = &a.envelope_out {
        emit(Some(p), &io::write_trace(&run.envelope))?;
    }
    let eye = link::eye_diagram(&run, &cfg)?;
    if let Some(p) = &a.eye_out {
        emit(Some(p), &eye.to_csv())?;
    }
    let m = eye.metrics;
    println!("bits = {}", cfg.bits.len());
    println!("rate_bps = {:.6e}", cfg.rate);
    println!("samples_per_bit = {}", cfg.samples_per_bit);
    println!("transitions = {}", m.transitions);
    println!("mean_high_v = {:.6e}", m.mean_high);
    println!("mean_low_v = {:.6e}", m.mean_low);
    println!("eye_opening_v = {:.6e}", m.opening);
    println!("eye_opening_rel = {:.6e}", m.opening / cfg.v0);
    println!("extinction_ratio = {:.6e}", m.extinction_ratio);
    println!("extinction_db = {:.3}", m.extinction_db);

    // Ring-down on the first falling edge.
    if let Some(bit) = (1..cfg.bits.len()).find(|&b| cfg.bits[b - 1] && !cfg.bits[b]) {
        let seg = link::edge_segment(&run, &cfg, bit)?;
        match link::fit_ring(&seg, RingKind::Down) {
            Ok(r) if r.identifiable => {
                println!("ring_down_gamma_hz = {:.6e}", r.gamma_m);
                if r.poor_fit {
                    println!("warning = ring-down residuals do not match an exponential");
                }
            }
            Ok(_) => println!("warning = ring-down too short to identify the linewidth"),
            Err(e) => println!("warning = ring-down fit failed: {e}"),
        }
    }
    Ok(())
}

fn swap_cmd(a: SwapArgs) -> CliResult<()> {
    let file = load(&a.device)?;
    let mut dev = file.device;
    if a.gamma_mi.is_some() || a.gamma_me.is_some() {
        dev = dev.with(|v| {
            if let Some(g) = a.gamma_mi {
                v.gamma_mi = g;
            }
            if let Some(g) = a.gamma_me {
                v.gamma_me = g;
            }
        })?;
    }
    let base = file.qubit.unwrap_or_else(|| QubitConfig::transmon_for(&dev));
    let q = QubitConfig::new(
        a.c_q.unwrap_or(base.c_q),
        a.f_mu.unwrap_or(base.f_mu),
        a.kappa_mu.unwrap_or(base.kappa_mu),
    )?;
    let r = swap::swap_feasibility(&dev, &q)?;
    println!("z_q_ohm = {:.6e}", r.z_q);
    println!("g_em_hz = {:.6e}", r.g_em);
    println!("gamma_mi_hz = {:.6e}", dev.gamma_mi());
    println!("threshold_gamma_hz = {:.6e}", r.threshold_gamma);
    println!("feasible = {}", r.feasible);
    println!("c_em = {:.6e}", r.c_em);
    if let Some(p) = &a.rabi_out {
        if !(a.duration > 0.0) {
            return Err(usage("--duration must be > 0"));
        }
        let rate = r.g_em.max(dev.gamma_mi()).max(q.kappa_mu);
        let n = ((a.duration * rate * 40.0).ceil() as usize).clamp(200, 2_000_000);
        let run = swap::rabi_swap_sim(&dev, &q, &linspace(0.0, a.duration, n + 1))?;
        emit(Some(p), &rabi_csv(&run.qubit, &run.phonon))?;
        if let (Some(t), Some(p)) = (run.first_swap_time, run.first_swap_transfer) {
            println!("first_swap_s = {t:.6e}");
            println!("first_swap_transfer = {p:.6e}");
        }
    }
    Ok(())
}

fn rabi_csv(qubit: &Trace, phonon: &Trace) -> String {
    debug_assert_eq!(qubit.x_unit, XUnit::Seconds);
    let mut out = String::from("t_s,qubit,phonon\n");
    for ((t, q), p) in qubit.x().iter().zip(qubit.y()).zip(phonon.y()) {
        out.push_str(&format!("{t:e},{q:e},{p:e}\n"));
    }
    out
}

fn sweep_cmd(a: SweepArgs) -> CliResult<()> {
    let file = load(&a.device)?;
    let mut ctx = SweepContext::from_file(&file)?;
    if let Some(p) = &a.p_mu {
        ctx.p_mu = io::parse_power(p).map_err(|e| usage(format!("--p-mu: {e}")))?;
    }
    if let Some(t) = a.temperature {
        ctx.temperature = t;
    }
    let values = SweepValues::parse(&a.values).map_err(|e| usage(format!("--values: {e}")))?;
    let names: Vec<&str> = a.quantity.iter().map(String::as_str).collect();
    let mut spec = SweepSpec::new(&a.param, values, &names);
    spec.hold_z_q = a.hold_z_q;
    spec.scale_gamma_me = a.scale_gamma_me;
    let table = io::run_sweep(&spec, &ctx)?;
    emit(a.out.as_deref(), &table.to_csv())
}
