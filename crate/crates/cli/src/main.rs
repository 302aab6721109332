//! `cavcool`: rates, detuning sweeps, optimal-curve tables, cooling
//! trajectories and numerical checks from the command line.

mod config;

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use cavcool::dynamics::{self, DynamicsError, EvolveOptions, PopulationVector};
use cavcool::hilbert::SpaceLayout;
use cavcool::oracle::{self, FitOptions, OracleError, OracleReport};
use cavcool::rates::{self, AmplitudeSet, RateError, SuppressionReport, SUPPRESSION_THRESHOLD};
use cavcool::sweep::{self, format_float, GridAxis, HeatmapQuantity, SweepError, SweepRecord, SweepSpec};
use cavcool::{Regime, Sideband, SystemParams};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use config::{singular, write_sidecar, ParamArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{0}")]
    Singular(String),
    #[error("tolerance exceeded: {0}")]
    Tolerance(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Singular(_) => 3,
            CliError::Tolerance(_) => 4,
            CliError::Numerical(_) => 5,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<RateError> for CliError {
    fn from(e: RateError) -> Self {
        singular(e)
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Singular { .. } => CliError::Singular(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::InvalidInput(_) | DynamicsError::NoSteadyState(_) | DynamicsError::Unreachable { .. } => {
                CliError::Invalid(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Rate(r) => singular(r),
            OracleError::InvalidInput(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "cavcool", version, about = "Cavity-assisted cooling of a trapped atom")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct OutputArgs {
    /// Write the result here instead of stdout; a `.config.json` sidecar is
    /// written next to it.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,

    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Debug, clap::Args)]
struct GridArgs {
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    dc_min: f64,
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    dc_max: f64,
    #[arg(long, default_value_t = 0.05)]
    dc_step: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rates, amplitudes and suppression flags at one parameter point.
    Rates {
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Rates over a (δc, Δ) grid, δc outer and Δ inner.
    Sweep {
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = -200.0, allow_hyphen_values = true)]
        delta_min: f64,
        #[arg(long, default_value_t = 60.0, allow_hyphen_values = true)]
        delta_max: f64,
        #[arg(long, default_value_t = 0.5)]
        delta_step: f64,
        #[arg(long, default_value_t = sweep::DEFAULT_MAX_POINTS)]
        max_points: usize,
        /// Also render an SVG heatmap.
        #[arg(long, value_name = "PATH")]
        heatmap: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = HeatmapKind::Nbar)]
        heatmap_quantity: HeatmapKind,
    },
    /// Rates along the optimal-detuning curve.
    OptCurve {
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Explicit comma-separated δc values; overrides the range flags.
        /// An empty string gives an empty table.
        #[arg(long, value_name = "LIST", allow_hyphen_values = true)]
        dc: Option<String>,
    },
    /// Phonon-population trajectory under the rate equation.
    Cool {
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long, default_value_t = 2.0)]
        initial_nbar: f64,
        /// Final time in units of 1/ν; defaults to five cooling times.
        #[arg(long)]
        t_final: Option<f64>,
        #[arg(long, default_value_t = 201)]
        samples: usize,
        /// Target ground occupation as a fraction of its steady value.
        #[arg(long, default_value_t = 0.99)]
        target: f64,
        /// Trap frequency ν/2π in Hz, for reporting times in seconds.
        #[arg(long)]
        trap_frequency_hz: Option<f64>,
    },
    /// Compare the closed-form rates against the numerical oracles.
    Check {
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long, value_enum, default_value_t = Mode::Trace)]
        mode: Mode,
        /// Relative tolerance; defaults to 1e-2 (trace) and 0.1 (lindblad).
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        cavity_dim: Option<usize>,
        #[arg(long)]
        motion_dim: Option<usize>,
        #[arg(long)]
        t_final: Option<f64>,
        #[arg(long, default_value_t = 2.0)]
        initial_nbar: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum HeatmapKind {
    Nbar,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Trace,
    Lindblad,
    Both,
}

const TRACE_TOLERANCE: f64 = 1e-2;
const LINDBLAD_TOLERANCE: f64 = 0.1;

fn emit(output: &OutputArgs, body: &[u8]) -> Result<(), CliError> {
    match &output.out {
        Some(path) => std::fs::write(path, body).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display()))),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(body)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn sidecar(output: &OutputArgs, command: &str, p: &SystemParams, options: serde_json::Value) -> Result<(), CliError> {
    match &output.out {
        Some(path) => write_sidecar(path, command, p, options),
        None => Ok(()),
    }
}

fn opt_num(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_else(|| "-".into())
}

#[derive(Serialize)]
struct RatesReport {
    params: SystemParams,
    heating: AmplitudeSet,
    cooling: AmplitudeSet,
    a_plus: f64,
    a_minus: f64,
    nbar: Option<f64>,
    w: f64,
    regime: Regime,
    suppression: SuppressionReport,
    warnings: Vec<String>,
}

fn rates_report(p: &SystemParams) -> Result<RatesReport, CliError> {
    let r = rates::rates(p)?;
    let mut warnings: Vec<String> = rates::weak_drive_issue(p).map(|i| i.message).into_iter().collect();
    warnings.extend(p.validate().warnings().map(|i| format!("{}: {}", i.field, i.message)));
    Ok(RatesReport {
        params: *p,
        heating: rates::amplitudes(p, Sideband::Heating)?,
        cooling: rates::amplitudes(p, Sideband::Cooling)?,
        a_plus: r.a_plus,
        a_minus: r.a_minus,
        nbar: r.nbar_ss,
        w: r.w,
        regime: r.regime,
        suppression: rates::suppression_report(p, SUPPRESSION_THRESHOLD)?,
        warnings,
    })
}

fn rates_text(r: &RatesReport) -> String {
    let p = &r.params;
    let mut s = String::new();
    let _ = writeln!(s, "delta   = {}", format_float(p.delta));
    let _ = writeln!(s, "delta_c = {}", format_float(p.delta_c));
    let c = |z: cavcool::C64| format!("{} {} {}i", format_float(z.re), if z.im < 0.0 { '-' } else { '+' }, format_float(z.im.abs()));
    let _ = writeln!(s, "T_S          = {}", c(r.heating.t_s));
    for set in [&r.heating, &r.cooling] {
        let tag = set.sign.symbol();
        let _ = writeln!(s, "T_L^gamma,{tag}  = {}", c(set.t_l_gamma));
        let _ = writeln!(s, "T_L^kappa,{tag}  = {}", c(set.t_l_kappa));
        let _ = writeln!(s, "T_c^gamma,{tag}  = {}", c(set.t_c_gamma));
        let _ = writeln!(s, "T_c^kappa,{tag}  = {}", c(set.t_c_kappa));
    }
    let _ = writeln!(s, "A+      = {}", format_float(r.a_plus));
    let _ = writeln!(s, "A-      = {}", format_float(r.a_minus));
    let _ = writeln!(s, "nbar    = {}", opt_num(r.nbar));
    let _ = writeln!(s, "W       = {}", format_float(r.w));
    let _ = writeln!(s, "regime  = {}", r.regime.as_str());
    for e in r.suppression.suppressed() {
        let _ = writeln!(s, "suppressed: {:?}{} (relative {:.3e})", e.amplitude, e.sign.symbol(), e.relative);
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn cmd_rates(params: &ParamArgs, output: &OutputArgs) -> Result<(), CliError> {
    let p = params.resolve()?;
    let report = rates_report(&p)?;
    let body = match output.format.unwrap_or(Format::Text) {
        Format::Text => rates_text(&report),
        Format::Json => serde_json::to_string_pretty(&report).expect("serializable") + "\n",
        Format::Csv => {
            let rec = SweepRecord::evaluate(&p, p.delta_c, p.delta)?;
            format!("{}\n{}\n", sweep::SWEEP_HEADER, rec.csv_row())
        }
    };
    emit(output, body.as_bytes())?;
    sidecar(output, "rates", &p, json!({ "opt": params.opt }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    params: &ParamArgs,
    output: &OutputArgs,
    grid: &GridArgs,
    delta: GridAxis,
    max_points: usize,
    heatmap: Option<&PathBuf>,
    quantity: HeatmapKind,
) -> Result<(), CliError> {
    if params.opt {
        return Err(CliError::Invalid("--opt has no meaning for a grid sweep".into()));
    }
    let p = params.resolve()?;
    let spec = SweepSpec { delta_c: GridAxis::new(grid.dc_min, grid.dc_max, grid.dc_step), delta, base: p, max_points };
    let records = sweep::run_sweep(&spec)?;
    let body = match output.format.unwrap_or(Format::Csv) {
        Format::Json => serde_json::to_vec_pretty(&records).expect("serializable"),
        Format::Csv | Format::Text => {
            let mut buf = Vec::new();
            sweep::write_records(&mut buf, &records)?;
            buf
        }
    };
    emit(output, &body)?;
    if let Some(path) = heatmap {
        let q = match quantity {
            HeatmapKind::Nbar => HeatmapQuantity::Nbar,
            HeatmapKind::W => HeatmapQuantity::W,
        };
        let svg = sweep::render_heatmap(&spec, &records, q);
        std::fs::write(path, svg).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    }
    sidecar(output, "sweep", &p, json!({ "delta_c": spec.delta_c, "delta": spec.delta, "max_points": max_points, "heatmap": heatmap, "heatmap_quantity": quantity }))
}

fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::Invalid(format!("bad number `{t}`"))))
        .collect()
}

fn cmd_opt_curve(params: &ParamArgs, output: &OutputArgs, grid: &GridArgs, dc: Option<&str>) -> Result<(), CliError> {
    let p = params.resolve()?;
    let values = match dc {
        Some(list) => parse_list(list)?,
        None => {
            let axis = GridAxis::new(grid.dc_min, grid.dc_max, grid.dc_step);
            axis.check("delta_c")?;
            axis.values()
        }
    };
    let rows = sweep::opt_curve_rows(&values, &p);
    let body = match output.format.unwrap_or(Format::Csv) {
        Format::Json => serde_json::to_vec_pretty(&rows).expect("serializable"),
        Format::Csv | Format::Text => {
            let mut buf = Vec::new();
            sweep::write_opt_curve(&mut buf, &rows)?;
            buf
        }
    };
    emit(output, &body)?;
    sidecar(output, "opt-curve", &p, json!({ "delta_c": values }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_cool(
    params: &ParamArgs,
    output: &OutputArgs,
    initial_nbar: f64,
    t_final: Option<f64>,
    samples: usize,
    target: f64,
    trap_frequency_hz: Option<f64>,
) -> Result<(), CliError> {
    let p = params.resolve()?;
    let r = rates::rates(&p)?;
    let t_final = match t_final {
        Some(t) => t,
        None if r.w != 0.0 => 5.0 / r.w.abs(),
        None => return Err(CliError::Invalid("no cooling dynamics (W = 0); pass --t-final".into())),
    };
    let p0 = PopulationVector::thermal(initial_nbar, None)?;
    let opts = EvolveOptions { samples, ..EvolveOptions::default() };
    let traj = dynamics::evolve(&p0, &r, p.eta, t_final, &opts)?;

    let (ground, time_to_target) = if r.regime == Regime::Cooling {
        let g = dynamics::ground_state_occupation(&r, traj.truncation)?;
        let t = dynamics::time_to_occupation(&p0, &r, p.eta, target * g.closed_form, &opts)?;
        (Some(g.closed_form), Some(t))
    } else {
        (None, None)
    };
    let seconds = |t: f64| trap_frequency_hz.map(|f| t / (2.0 * std::f64::consts::PI * f));

    let body = match output.format.unwrap_or(Format::Csv) {
        Format::Json => {
            let doc = json!({
                "rates": r,
                "ground_occupation": ground,
                "target_fraction": target,
                "time_to_target": time_to_target,
                "time_to_target_seconds": time_to_target.and_then(seconds),
                "trajectory": traj,
            });
            serde_json::to_vec_pretty(&doc).expect("serializable")
        }
        Format::Csv | Format::Text => {
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            buf
        }
    };
    emit(output, &body)?;
    if let Some(t) = time_to_target {
        let extra = seconds(t).map(|s| format!(" ({s:.4e} s)")).unwrap_or_default();
        eprintln!("ground occupation {:.6}; {:.0}% reached at t = {t:.6e}/nu{extra}", ground.unwrap_or(f64::NAN), 100.0 * target);
    }
    sidecar(output, "cool", &p, json!({ "initial_nbar": initial_nbar, "t_final": t_final, "samples": samples, "target": target, "trap_frequency_hz": trap_frequency_hz }))
}

fn check_trace(p: &SystemParams, nc: usize, tol: f64) -> Result<(OracleReport, bool), CliError> {
    let layout = SpaceLayout::internal(nc).map_err(|e| CliError::Invalid(e.to_string()))?;
    let r = oracle::trace_formula_rates(p, layout)?;
    let ok = r.max_rate_error().is_some_and(|e| e <= tol);
    Ok((r, ok))
}

fn check_lindblad(p: &SystemParams, layout: SpaceLayout, opts: &FitOptions, tol: f64) -> Result<(OracleReport, bool), CliError> {
    if p.eta <= 0.0 {
        return Err(CliError::Invalid("the master-equation check needs eta > 0".into()));
    }
    let r = oracle::lindblad_rates(p, layout, opts)?;
    let ok = r.w_rel_error.is_some_and(|e| e <= tol) && r.regime_numeric == r.regime_analytic;
    Ok((r, ok))
}

#[allow(clippy::too_many_arguments)]
fn cmd_check(
    params: &ParamArgs,
    output: &OutputArgs,
    mode: Mode,
    tolerance: Option<f64>,
    cavity_dim: Option<usize>,
    motion_dim: Option<usize>,
    t_final: Option<f64>,
    initial_nbar: f64,
) -> Result<(), CliError> {
    let p = params.resolve()?;
    if let Some(t) = tolerance {
        if !(t > 0.0) {
            return Err(CliError::Invalid(format!("tolerance must be positive, got {t}")));
        }
    }
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    if matches!(mode, Mode::Trace | Mode::Both) {
        let (r, ok) = check_trace(&p, cavity_dim.unwrap_or(3), tolerance.unwrap_or(TRACE_TOLERANCE))?;
        if !ok {
            failed.push("trace");
        }
        reports.push(r);
    }
    if matches!(mode, Mode::Lindblad | Mode::Both) {
        let default = oracle::default_lindblad_layout();
        let layout = SpaceLayout::new(cavity_dim.unwrap_or(default.cavity_dim), motion_dim.unwrap_or(default.motion_dim))
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        let opts = FitOptions { initial_nbar, t_final, ..FitOptions::default() };
        let (r, ok) = check_lindblad(&p, layout, &opts, tolerance.unwrap_or(LINDBLAD_TOLERANCE))?;
        if !ok {
            failed.push("lindblad");
        }
        reports.push(r);
    }
    let body = serde_json::to_string_pretty(&reports).expect("serializable") + "\n";
    emit(output, body.as_bytes())?;
    sidecar(output, "check", &p, json!({ "mode": mode, "tolerance": tolerance, "cavity_dim": cavity_dim, "motion_dim": motion_dim, "t_final": t_final, "initial_nbar": initial_nbar }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Tolerance(failed.join(", ")))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Rates { params, output } => cmd_rates(params, output),
        Command::Sweep { params, output, grid, delta_min, delta_max, delta_step, max_points, heatmap, heatmap_quantity } => cmd_sweep(
            params,
            output,
            grid,
            GridAxis::new(*delta_min, *delta_max, *delta_step),
            *max_points,
            heatmap.as_ref(),
            *heatmap_quantity,
        ),
        Command::OptCurve { params, output, grid, dc } => cmd_opt_curve(params, output, grid, dc.as_deref()),
        Command::Cool { params, output, initial_nbar, t_final, samples, target, trap_frequency_hz } => {
            cmd_cool(params, output, *initial_nbar, *t_final, *samples, *target, *trap_frequency_hz)
        }
        Command::Check { params, output, mode, tolerance, cavity_dim, motion_dim, t_final, initial_nbar } => {
            cmd_check(params, output, *mode, *tolerance, *cavity_dim, *motion_dim, *t_final, *initial_nbar)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
