//! Command-line front end: `run`, `audit` and `sweep`.
//!
//! Exit codes: 0 success, 1 simulation fault or failed audit, 2 usage or
//! configuration error.

use crate::dvpp::{self, Allocation, DvppSpec, LedgerReport};
use crate::engine::{self, compute_metrics, EngineError, Flag, Metrics, Scenario, SimOutput, TraceKind};
use crate::network::LoadEvent;
use clap::{Args, Parser, Subcommand};
use plotters::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAULT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Ledger closure tolerance applied to every run, system pu.
pub const LEDGER_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "dvppsim", version, about = "Dynamic virtual power plant simulator for the 9-bus system")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write timeseries, metrics and plots.
    Run(RunArgs),
    /// Allocate a DVPP spec and check that the participation factors sum to one.
    Audit(AuditArgs),
    /// Run a scenario over a grid of parameter values.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Built-in experiment (1, 2 or 3).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3), required_unless_present = "config", conflicts_with = "config")]
    pub experiment: Option<u32>,
    /// Scenario file (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Step size, s.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Horizon, s.
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Bus of the load step.
    #[arg(long)]
    pub step_bus: Option<usize>,
    /// Active power of the load step, system pu.
    #[arg(long, allow_negative_numbers = true)]
    pub step_p: Option<f64>,
    /// Reactive power of the load step, system pu.
    #[arg(long, allow_negative_numbers = true)]
    pub step_q: Option<f64>,
    /// Time of the load step, s.
    #[arg(long)]
    pub step_t: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output directory.
    #[arg(long, env = "DVPPSIM_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Also write SVG plots.
    #[arg(long)]
    pub plots: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    /// Built-in spec name (dvpp1, dvpp2) or path to a spec file.
    pub spec: String,
    /// Write the member frequency responses to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Print the full allocation as JSON instead of the text report.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Parameter to vary: j, d, step_p, t_slow, t_fast or dt.
    #[arg(long)]
    pub param: String,
    /// Values, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true, allow_negative_numbers = true)]
    pub values: Vec<f64>,
    /// Concurrent runs (default: available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, env = "DVPPSIM_OUT", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Fault(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Fault(_) => EXIT_FAULT,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Fault(e.to_string())
        }
    }
}

/// Parses arguments, executes, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| ()),
        Command::Audit(a) => cmd_audit(a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(a).map(|_| ()),
    }
}

/// Builds the scenario selected by the arguments, with overrides applied.
pub fn resolve_scenario(a: &ScenarioArgs) -> Result<Scenario, CliError> {
    let mut sc = match (&a.experiment, &a.config) {
        (Some(n), _) => engine::build_experiment(*n)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            Scenario::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        (None, None) => return Err(CliError::Config("either --experiment or --config is required".into())),
    };
    if let Some(dt) = a.dt {
        sc.solver.dt = dt;
    }
    if let Some(t) = a.t_end {
        sc.solver.t_end = t;
    }
    if a.step_bus.is_some() || a.step_p.is_some() || a.step_q.is_some() || a.step_t.is_some() {
        let base = sc.events.first().copied().unwrap_or_else(engine::default_step);
        sc.events = vec![LoadEvent {
            bus: a.step_bus.unwrap_or(base.bus),
            dp: a.step_p.unwrap_or(base.dp),
            dq: a.step_q.unwrap_or(base.dq),
            t: a.step_t.unwrap_or(base.t),
        }];
    }
    sc.validate()?;
    let net = sc.network.load()?;
    for e in &sc.events {
        if net.index(e.bus).is_err() {
            return Err(CliError::Config(format!("load step bus {} is not in the network", e.bus)));
        }
    }
    Ok(sc)
}

/// Structured summary written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub dt: f64,
    pub t_end: f64,
    pub event_time: Option<f64>,
    pub metrics: Option<Metrics>,
    pub flags: Vec<Flag>,
    pub ledger: LedgerReport,
    pub max_fixed_point_iterations: usize,
}

pub fn summarize(sc: &Scenario, out: &SimOutput) -> Result<RunSummary, CliError> {
    let event_time = sc.first_event_time();
    let metrics = event_time.map(|t| compute_metrics(out, t)).transpose()?;
    let ledger = dvpp::check_power_ledger(&out.ledger, LEDGER_TOL).map_err(|e| CliError::Fault(e.to_string()))?;
    Ok(RunSummary {
        scenario: sc.name.clone(),
        dt: sc.solver.dt,
        t_end: sc.solver.t_end,
        event_time,
        metrics,
        flags: out.flags.clone(),
        ledger,
        max_fixed_point_iterations: out.max_fixed_point_iterations,
    })
}

pub fn cmd_run(a: &RunArgs) -> Result<RunSummary, CliError> {
    let sc = resolve_scenario(&a.scenario)?;
    let out = engine::run(&sc)?;
    let summary = summarize(&sc, &out)?;
    write_atomic(&a.out.join("timeseries.csv"), out.to_csv().as_bytes())?;
    write_atomic(&a.out.join("metrics.json"), serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes())?;
    write_atomic(&a.out.join("scenario.json"), sc.to_json().as_bytes())?;
    if a.plots {
        let svg = render_plots(&out).map_err(CliError::Fault)?;
        write_atomic(&a.out.join("response.svg"), svg.as_bytes())?;
    }
    print_summary(&summary);
    if !summary.ledger.pass {
        return Err(CliError::Fault(format!(
            "power ledger does not close (residual {:.3e} pu)",
            summary.ledger.max_residual_p.max(summary.ledger.max_residual_q)
        )));
    }
    Ok(summary)
}

fn print_summary(s: &RunSummary) {
    let mut o = std::io::stdout().lock();
    let _ = writeln!(o, "scenario      {}", s.scenario);
    if let Some(m) = &s.metrics {
        let _ = writeln!(o, "nadir         {:.4} Hz at {:.3} s", m.nadir_hz, m.nadir_time_s);
        let _ = writeln!(o, "max ROCOF     {:.4} Hz/s", m.max_rocof_hz_per_s);
        let _ = writeln!(o, "coherence     {:.4} Hz", m.coherence_hz);
        let _ = writeln!(o, "steady state  {:+.4} Hz", m.steady_state_dev_hz);
        let _ = writeln!(o, "recovery      {:.3} s", m.recovery_time_s);
        if !m.relay_order.is_empty() {
            let _ = writeln!(o, "relay order   {}", m.relay_order.join(", "));
        }
    }
    let _ = writeln!(o, "ledger        {} (max residual {:.2e} pu)", if s.ledger.pass { "closed" } else { "OPEN" }, s.ledger.max_residual_p.max(s.ledger.max_residual_q));
    for f in &s.flags {
        let _ = writeln!(o, "flag          {} {:?} at {:.3} s", f.id, f.kind, f.t);
    }
}

pub fn load_spec(name: &str) -> Result<DvppSpec, CliError> {
    if let Some(s) = dvpp::builtin_spec(name) {
        return Ok(s);
    }
    let text = std::fs::read_to_string(name).map_err(|e| CliError::Config(format!("`{name}` is neither a built-in spec nor a readable file: {e}")))?;
    DvppSpec::from_json(&text).map_err(|e| CliError::Config(format!("{name}: {e}")))
}

pub fn audit_report(alloc: &Allocation) -> String {
    let mut s = format!("allocation {} ({} MVA)\n", alloc.name, alloc.rating_mva);
    s += &format!("  target omega-p  {}\n", alloc.xi_target.phi_wp);
    s += &format!("  target v-q      {}\n", alloc.xi_target.gamma_vq);
    for m in &alloc.members {
        s += &format!(
            "  {:<10} {:?} {} MVA{}\n    gamma omega-p {}\n    gamma v-q     {}\n",
            m.id,
            m.class,
            m.capacity_mva,
            if m.controllable { "" } else { " (fixed)" },
            m.gamma.phi_wp,
            m.gamma.gamma_vq
        );
    }
    let a = &alloc.audit;
    s += &format!(
        "  sum-to-one residual: omega-p {:.3e} (at {:.3e} rad/s), v-q {:.3e} (at {:.3e} rad/s) over {} points\n  audit {}\n",
        a.max_residual_p,
        a.worst_omega_p,
        a.max_residual_q,
        a.worst_omega_q,
        a.points,
        if a.pass { "PASS" } else { "FAIL" }
    );
    s
}

pub fn cmd_audit(a: &AuditArgs) -> Result<Allocation, CliError> {
    let spec = load_spec(&a.spec)?;
    let alloc = dvpp::allocate(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    if a.json {
        println!("{}", alloc.to_json());
    } else {
        print!("{}", audit_report(&alloc));
    }
    if let Some(path) = &a.csv {
        write_atomic(path, dvpp::frequency_response_csv(&alloc, &dvpp::audit_grid()).as_bytes())?;
    }
    if !alloc.audit.pass {
        return Err(CliError::Fault(format!("sum-to-one residual {:.3e} exceeds {:.0e}", alloc.audit.max_residual(), dvpp::AUDIT_TOL)));
    }
    Ok(alloc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub status: String,
    pub nadir_hz: Option<f64>,
    pub nadir_time_s: Option<f64>,
    pub max_rocof_hz_per_s: Option<f64>,
    pub coherence_hz: Option<f64>,
    pub steady_state_dev_hz: Option<f64>,
    pub recovery_time_s: Option<f64>,
    pub damping_ratio: Option<f64>,
}

/// Runs `base` once per value. Rows keep the order of `values`; a failed
/// point is reported in its row and does not stop the others.
pub fn sweep(base: &Scenario, param: &str, values: &[f64], jobs: Option<usize>) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    engine::apply_param(&mut base.clone(), param, values[0])?;
    let one = |&v: &f64| -> SweepRow {
        let mut row = SweepRow {
            param: param.to_string(),
            value: v,
            status: "ok".into(),
            nadir_hz: None,
            nadir_time_s: None,
            max_rocof_hz_per_s: None,
            coherence_hz: None,
            steady_state_dev_hz: None,
            recovery_time_s: None,
            damping_ratio: None,
        };
        let mut sc = base.clone();
        let res = engine::apply_param(&mut sc, param, v).and_then(|_| {
            let out = engine::run(&sc)?;
            match sc.first_event_time() {
                Some(t) => compute_metrics(&out, t).map(Some),
                None => Ok(None),
            }
        });
        match res {
            Ok(Some(m)) => {
                row.nadir_hz = Some(m.nadir_hz);
                row.nadir_time_s = Some(m.nadir_time_s);
                row.max_rocof_hz_per_s = Some(m.max_rocof_hz_per_s);
                row.coherence_hz = Some(m.coherence_hz);
                row.steady_state_dev_hz = Some(m.steady_state_dev_hz);
                row.recovery_time_s = Some(m.recovery_time_s);
                row.damping_ratio = m.damping_ratio;
            }
            Ok(None) => {}
            Err(e) => row.status = format!("error: {e}"),
        }
        row
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| values.par_iter().map(one).collect()))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Vec<SweepRow>, CliError> {
    if a.jobs == Some(0) {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let base = resolve_scenario(&a.scenario)?;
    let rows = sweep(&base, &a.param, &a.values, a.jobs)?;
    let text = sweep_csv(&rows);
    write_atomic(&a.out.join("sweep.csv"), text.as_bytes())?;
    print!("{text}");
    if rows.iter().all(|r| r.status != "ok") {
        return Err(CliError::Fault("every sweep point failed".into()));
    }
    Ok(rows)
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Fault(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644)).map_err(io)?;
    }
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

const PLOT_POINTS: usize = 2000;

/// Three stacked panels: frequency, ΔP and ΔQ against time.
pub fn render_plots(out: &SimOutput) -> Result<String, String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (960, 1080)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| e.to_string())?;
        let panels = root.split_evenly((3, 1));
        let stride = (out.t.len() / PLOT_POINTS).max(1);
        let t_end = *out.t.last().unwrap_or(&1.0);
        type Pick = fn(&engine::Trace) -> &[f64];
        let specs: [(&str, Pick, bool); 3] = [
            ("f (Hz)", |t| &t.f_hz, false),
            ("dP (pu)", |t| &t.dp, true),
            ("dQ (pu)", |t| &t.dq, true),
        ];
        for (area, (label, pick, members)) in panels.iter().zip(specs) {
            let traces: Vec<&engine::Trace> = out.traces.iter().filter(|t| members || t.kind == TraceKind::Device).collect();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for tr in &traces {
                for v in pick(tr) {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
            }
            if !(hi - lo > 1e-12) {
                lo -= 1e-3;
                hi += 1e-3;
            }
            let pad = 0.05 * (hi - lo);
            let mut chart = ChartBuilder::on(area)
                .margin(12)
                .x_label_area_size(30)
                .y_label_area_size(70)
                .caption(label, ("sans-serif", 18))
                .build_cartesian_2d(0.0..t_end, (lo - pad)..(hi + pad))
                .map_err(|e| e.to_string())?;
            chart.configure_mesh().x_desc("t (s)").draw().map_err(|e| e.to_string())?;
            for (i, tr) in traces.iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                let y = pick(tr);
                let pts = (0..out.t.len()).step_by(stride).map(|k| (out.t[k], y[k]));
                chart
                    .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                    .map_err(|e| e.to_string())?
                    .label(tr.id.clone())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| e.to_string())?;
        }
        root.present().map_err(|e| e.to_string())?;
    }
    Ok(svg)
}
