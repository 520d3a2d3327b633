//! Command-line entry points. Each subcommand delegates to one experiments or
//! analysis operation and writes a table plus metadata.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::analysis::{self, DetectSettings, TailSettings, Transition};
use crate::config::{Format, RunConfig};
use crate::error::{ConfigError, SolverError};
use crate::experiments::{self, log_grid, QuenchRecord};
use crate::hierarchy::{build_hierarchy, HierarchyBasis};
use crate::kernel::effective_view;
use crate::model::Scene;
use crate::output::{mode_column, read_csv, write_report, write_table, Cell, Metadata, Table};
use crate::solver::{continuation_sweep, find_steady, Model, SteadyState};

#[derive(Debug, Parser)]
#[command(name = "dyecav", version, about = "Photon-gas / dye-reservoir quench kinetics")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Bundled configuration (paper_fig1, paper_fig1_21modes).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps and maps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub hierarchy_depth: Option<usize>,
    /// Integrate the molecular field bin by bin instead of the hierarchy.
    #[arg(long, global = true)]
    pub full_field: bool,
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Steady states over the pump grid.
    Steady,
    /// Equilibration time after a small quench at every grid pump.
    Sweep,
    /// Per-mode trace of one large quench.
    Quench,
    /// Equilibration times for every (start, end) pump pair.
    Map2d,
    /// Multi-step pump schedule, optionally scanning the final delay.
    Schedule,
    /// Transitions, critical exponents and tail fit from earlier outputs.
    Fit {
        /// Directory holding sweep.csv (and optionally quench.csv); defaults to the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Truncated hierarchy against full-field steady states.
    HierarchyCheck {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2])]
        depths: Vec<usize>,
    },
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Solver(SolverError),
    Io(std::io::Error),
    /// Most cells ran out of time budget.
    Timeout(String),
    /// Some cells failed; outputs were written and flagged partial.
    Partial(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Solver(_) | RunError::Partial(_) => 3,
            RunError::Timeout(_) => 4,
            RunError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "configuration error: {e}"),
            RunError::Solver(e) => write!(f, "solver failure: {e}"),
            RunError::Io(e) => write!(f, "io error: {e}"),
            RunError::Timeout(s) => write!(f, "timeout-dominated run: {s}"),
            RunError::Partial(s) => write!(f, "partial results: {s}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}
impl From<SolverError> for RunError {
    fn from(e: SolverError) -> Self {
        RunError::Solver(e)
    }
}
impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

/// Parse arguments, run, print errors, and return the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("dyecav: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(p), _) => RunConfig::from_path(&p.to_string_lossy())?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => return Err(ConfigError::Missing(vec!["--config or --preset".into()])),
    };
    if let Some(d) = cli.hierarchy_depth {
        cfg.hierarchy.depth = d;
        cfg.hierarchy.full_field = false;
    }
    if cli.full_field {
        cfg.hierarchy.full_field = true;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.to_string_lossy().into_owned();
    }
    if let Some(f) = cli.format {
        cfg.output.format = match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx {
    cfg: RunConfig,
    scene: Scene,
    basis: Option<HierarchyBasis>,
    dir: PathBuf,
}

impl Ctx {
    fn model(&self) -> Model<'_> {
        Model::new(&self.scene, self.basis.as_ref())
    }

    fn meta(&self, command: &str) -> Metadata {
        Metadata::new(command, &self.cfg, &self.scene, self.basis.as_ref())
    }

    fn mode_columns(&self, prefix: &str) -> Vec<String> {
        self.scene.modes.modes.iter().map(|&m| mode_column(prefix, m)).collect()
    }

    fn write(&self, name: &str, table: &Table, meta: &Metadata) -> std::io::Result<Vec<PathBuf>> {
        write_table(&self.dir, name, table, meta, &self.cfg.output.format)
    }
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, RunError> {
    let cfg = resolve_config(cli)?;
    if let Some(j) = cli.jobs {
        // a pool set earlier in the same process (tests) is fine to keep
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
    let scene = Scene::build(&cfg.scene)?;
    let basis = if cfg.hierarchy.full_field { None } else { Some(build_hierarchy(&scene, cfg.hierarchy.depth)?) };
    let dir = PathBuf::from(&cfg.output.dir);
    let ctx = Ctx { cfg, scene, basis, dir };
    match &cli.command {
        Command::Steady => cmd_steady(&ctx),
        Command::Sweep => cmd_sweep(&ctx),
        Command::Quench => cmd_quench(&ctx),
        Command::Map2d => cmd_map2d(&ctx),
        Command::Schedule => cmd_schedule(&ctx),
        Command::Fit { input } => cmd_fit(&ctx, input.as_deref()),
        Command::HierarchyCheck { depths } => cmd_hierarchy_check(&ctx, depths),
    }
}

/// Turn per-cell outcomes into the run's verdict after outputs are written.
fn verdict(paths: Vec<PathBuf>, failures: usize, timeouts: usize, cells: usize) -> Result<Vec<PathBuf>, RunError> {
    if cells > 0 && 2 * timeouts > cells {
        Err(RunError::Timeout(format!("{timeouts} of {cells} cells hit t_max")))
    } else if failures > 0 {
        Err(RunError::Partial(format!("{failures} of {cells} cells failed")))
    } else {
        Ok(paths)
    }
}

fn transitions_json(ts: &[Transition]) -> Value {
    serde_json::to_value(ts).unwrap_or(Value::Null)
}

/// Continuation over the config grid plus transition detection. Failed grid
/// points are skipped for detection.
fn phase_structure(ctx: &Ctx, grid: &[f64]) -> Result<(Vec<Result<SteadyState, SolverError>>, Vec<Transition>), SolverError> {
    let model = ctx.model();
    let sweep = continuation_sweep(&model, grid, &ctx.cfg.solver);
    let ok: Vec<SteadyState> = sweep.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    let opts = DetectSettings { slope_threshold: ctx.cfg.experiment.fit.slope_threshold, ..DetectSettings::default() };
    let ts = analysis::detect_transitions(&model, &ok, &ctx.cfg.solver, &opts)?;
    Ok((sweep, ts))
}

fn cmd_steady(ctx: &Ctx) -> Result<Vec<PathBuf>, RunError> {
    let grid = ctx.cfg.experiment.grid();
    let sweep = continuation_sweep(&ctx.model(), &grid, &ctx.cfg.solver);
    let mut cols = vec!["P".to_string(), "converged".into(), "residual_norm".into(), "newton_iterations".into()];
    cols.extend(ctx.mode_columns("n"));
    let mut t = Table::new(cols);
    let m = ctx.scene.n_modes();
    let mut failures = 0;
    for (p, r) in grid.iter().zip(&sweep) {
        let mut row: Vec<Cell> = vec![(*p).into()];
        match r {
            Ok(ss) => {
                row.extend([ss.converged.into(), ss.residual_norm.into(), ss.newton_iterations.into()]);
                row.extend(ss.n().iter().map(|&x| Cell::Num(x)));
            }
            Err(_) => {
                failures += 1;
                row.extend([false.into(), f64::NAN.into(), 0usize.into()]);
                row.extend((0..m).map(|_| Cell::Num(f64::NAN)));
            }
        }
        t.push(row);
    }
    let mut meta = ctx.meta("steady");
    meta.partial = failures > 0;
    meta.failures = failures;
    let paths = ctx.write("steady", &t, &meta)?;
    verdict(paths, failures, 0, grid.len())
}

fn timed_out(r: &QuenchRecord) -> bool {
    !r.converged && r.error.is_none()
}

fn cmd_sweep(ctx: &Ctx) -> Result<Vec<PathBuf>, RunError> {
    let e = &ctx.cfg.experiment;
    let grid = e.grid();
    let (steady, ts) = phase_structure(ctx, &grid)?;
    let p_crit: Vec<f64> = ts.iter().map(|t| t.p_crit).collect();
    let recs = experiments::sweep_1d(&ctx.model(), &grid, e.quench_fraction, &e.quench(), &ctx.cfg.solver);
    let mut cols = vec!["P".to_string(), "P_end".into(), "t_eq".into(), "t_last".into(), "converged".into(), "delta0".into()];
    cols.extend(ctx.mode_columns("n"));
    cols.push("interval".into());
    let mut t = Table::new(cols);
    let m = ctx.scene.n_modes();
    for ((p, r), ss) in grid.iter().zip(&recs).zip(&steady) {
        let mut row: Vec<Cell> = vec![(*p).into(), r.p_end.into(), r.t_eq.into(), r.t_last.into(), r.converged.into(), r.delta0.into()];
        match ss {
            Ok(ss) => row.extend(ss.n().iter().map(|&x| Cell::Num(x))),
            Err(_) => row.extend((0..m).map(|_| Cell::Num(f64::NAN))),
        }
        row.push(experiments::interval_label(*p, &p_crit).into());
        t.push(row);
    }
    let failures = recs.iter().filter(|r| r.error.is_some()).count();
    let timeouts = recs.iter().filter(|r| timed_out(r)).count();
    let mut meta = ctx.meta("sweep");
    meta.partial = failures > 0;
    meta.failures = failures + timeouts;
    meta.summary = json!({ "transitions": transitions_json(&ts) });
    let paths = ctx.write("sweep", &t, &meta)?;
    verdict(paths, failures, timeouts, recs.len())
}

/// Steady states at two pumps, the first relaxed from vacuum.
fn steady_pair(ctx: &Ctx, p0: f64, p1: f64) -> Result<(SteadyState, SteadyState), SolverError> {
    let model = ctx.model();
    let a = continuation_sweep(&model, &[p0], &ctx.cfg.solver).remove(0)?;
    let b = find_steady(&model, p1, &a.y, &ctx.cfg.solver)?;
    Ok((a, b))
}

fn cmd_quench(ctx: &Ctx) -> Result<Vec<PathBuf>, RunError> {
    let tc = &ctx.cfg.experiment.trace;
    let model = ctx.model();
    let (a, b) = steady_pair(ctx, tc.p_start, tc.p_end)?;
    let trace = experiments::big_quench_trace(&model, &a, &b, &tc.times(), &ctx.cfg.solver)?;
    let rec = experiments::quench_between(&model, &a, &b, &ctx.cfg.experiment.quench(), &ctx.cfg.solver)?;
    let mut cols = vec!["t".to_string()];
    cols.extend(ctx.mode_columns("n"));
    let mut t = Table::new(cols);
    for (time, n) in trace.times.iter().zip(&trace.n) {
        let mut row: Vec<Cell> = vec![(*time).into()];
        row.extend(n.iter().map(|&x| Cell::Num(x)));
        t.push(row);
    }
    let eta = effective_view(&b.state, &ctx.scene, ctx.basis.as_ref()).eta;
    let mut meta = ctx.meta("quench");
    meta.summary = json!({
        "P_start": tc.p_start,
        "P_end": tc.p_end,
        "t_eq": rec.t_eq,
        "converged": rec.converged,
        "n_end": trace.n_end,
        "eta_end": eta.as_slice(),
        "modes": rec.modes,
    });
    let paths = ctx.write("quench", &t, &meta)?;
    verdict(paths, 0, usize::from(!rec.converged), 1)
}

fn cmd_map2d(ctx: &Ctx) -> Result<Vec<PathBuf>, RunError> {
    let e = &ctx.cfg.experiment;
    let (_, ts) = phase_structure(ctx, &e.grid())?;
    let p_crit: Vec<f64> = ts.iter().map(|t| t.p_crit).collect();
    let map = experiments::quench_map(&ctx.model(), &e.map_start, &e.map_end, &p_crit, &e.quench(), &ctx.cfg.solver);
    let mut t = Table::new(
        ["P_start", "P_end", "t_eq", "converged", "start_interval", "end_interval"].iter().map(|s| s.to_string()).collect(),
    );
    let (mut failures, mut timeouts) = (0, 0);
    for (r, ps) in map.p_start.iter().enumerate() {
        for (c, pe) in map.p_end.iter().enumerate() {
            let teq = map.t_eq[r][c];
            let ok = map.converged[r][c];
            if !teq.is_finite() {
                failures += 1;
            } else if !ok {
                timeouts += 1;
            }
            t.push(vec![(*ps).into(), (*pe).into(), teq.into(), ok.into(), map.start_labels[r].into(), map.end_labels[c].into()]);
        }
    }
    let mut meta = ctx.meta("map2d");
    meta.partial = failures > 0;
    meta.failures = failures + timeouts;
    meta.summary = json!({ "transitions": transitions_json(&ts) });
    let cells = map.p_start.len() * map.p_end.len();
    let paths = ctx.write("map2d", &t, &meta)?;
    verdict(paths, failures, timeouts, cells)
}

fn cmd_schedule(ctx: &Ctx) -> Result<Vec<PathBuf>, RunError> {
    let sc = ctx.cfg.experiment.schedule.as_ref().ok_or_else(|| ConfigError::Missing(vec!["experiment.schedule".into()]))?;
    let model = ctx.model();
    let q = ctx.cfg.experiment.quench();
    let start = continuation_sweep(&model, &[sc.p_initial], &ctx.cfg.solver).remove(0)?;
    let mut cols = vec!["delay".to_string(), "t_eq".into(), "total_time".into(), "converged".into()];
    cols.extend(ctx.mode_columns("peak"));
    let mut t = Table::new(cols);
    let m = ctx.scene.n_modes();
    let (mut failures, mut timeouts, mut cells) = (0, 0, 0);
    for (delay, schedule) in sc.variants()? {
        cells += 1;
        let delay = delay.unwrap_or_else(|| schedule.last_switch());
        let mut row: Vec<Cell> = vec![delay.into()];
        match experiments::run_schedule(&model, sc.p_initial, &schedule, &start.y, &q, &ctx.cfg.solver) {
            Ok(r) => {
                timeouts += usize::from(timed_out(&r));
                row.extend([r.t_eq.into(), r.total_time.into(), r.converged.into()]);
                row.extend(r.modes.iter().map(|md| Cell::Num(md.n_peak)));
            }
            Err(_) => {
                failures += 1;
                row.extend([f64::NAN.into(), f64::NAN.into(), false.into()]);
                row.extend((0..m).map(|_| Cell::Num(f64::NAN)));
            }
        }
        t.push(row);
    }
    let mut meta = ctx.meta("schedule");
    meta.partial = failures > 0;
    meta.failures = failures + timeouts;
    let paths = ctx.write("schedule", &t, &meta)?;
    verdict(paths, failures, timeouts, cells)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str, path: &Path) -> Result<Vec<f64>, RunError> {
    let k = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| ConfigError::Invalid { key: path.display().to_string(), msg: format!("no column `{name}`") })?;
    Ok(rows.iter().map(|r| r[k].parse::<f64>().unwrap_or(f64::NAN)).collect())
}

fn check_provenance(ctx: &Ctx, meta_path: &Path) -> Result<(), RunError> {
    let text = std::fs::read_to_string(meta_path)?;
    let meta: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let stored = RunConfig::parse(meta["config"].as_str().unwrap_or_default())?;
    if stored.scene != ctx.cfg.scene || stored.hierarchy != ctx.cfg.hierarchy {
        return Err(ConfigError::invalid(&meta_path.display().to_string(), "outputs were produced with a different scene or representation").into());
    }
    Ok(())
}

fn cmd_fit(ctx: &Ctx, input: Option<&Path>) -> Result<Vec<PathBuf>, RunError> {
    let dir = input.map(Path::to_path_buf).unwrap_or_else(|| ctx.dir.clone());
    let sweep_path = dir.join("sweep.csv");
    if !sweep_path.exists() {
        return Err(ConfigError::Io { path: sweep_path.display().to_string(), msg: "run `sweep` first (csv format)".into() }.into());
    }
    check_provenance(ctx, &dir.join("sweep.meta.json"))?;
    let (header, rows) = read_csv(&sweep_path)?;
    let grid = column(&header, &rows, "P", &sweep_path)?;
    let (_, ts) = phase_structure(ctx, &grid)?;
    let model = ctx.model();
    let e = &ctx.cfg.experiment;
    let fc = &e.fit;
    let window = (fc.window[0], fc.window[1]);
    let frac = e.quench_fraction;
    let mut exponents = Vec::new();
    let mut failures = 0;
    for tr in &ts {
        let xs = log_grid(window.0, window.1, fc.window_points);
        // grid of post-quench pumps on both sides, expressed through the pre-quench pump
        let mut pre: Vec<f64> = xs.iter().map(|x| tr.p_crit * (1.0 - x) / (1.0 + frac)).collect();
        pre.extend(xs.iter().map(|x| tr.p_crit * (1.0 + x) / (1.0 + frac)));
        let recs = experiments::sweep_1d(&model, &pre, frac, &e.quench(), &ctx.cfg.solver);
        let pts: Vec<(f64, f64)> = recs.iter().filter(|r| r.converged).map(|r| (r.p_end, r.t_eq)).collect();
        match analysis::fit_critical_exponent(&pts, tr.p_crit, window) {
            Ok((below, above)) => exponents.push(json!({ "p_crit": tr.p_crit, "below": below, "above": above })),
            Err(err) => {
                failures += 1;
                exponents.push(json!({ "p_crit": tr.p_crit, "error": err.to_string() }));
            }
        }
    }
    let mut report = json!({ "transitions": transitions_json(&ts), "exponents": exponents });
    let quench_path = dir.join("quench.csv");
    if quench_path.exists() {
        check_provenance(ctx, &dir.join("quench.meta.json"))?;
        let (h, r) = read_csv(&quench_path)?;
        let times = column(&h, &r, "t", &quench_path)?;
        let tc = &e.trace;
        let (_, end) = steady_pair(ctx, tc.p_start, tc.p_end)?;
        let view = effective_view(&end.state, &ctx.scene, ctx.basis.as_ref());
        let mut tails = serde_json::Map::new();
        for (i, &mi) in ctx.scene.modes.modes.iter().enumerate() {
            let name = mode_column("n", mi);
            let n = column(&h, &r, &name, &quench_path)?;
            let s = TailSettings {
                window: (fc.tail_window[0], fc.tail_window[1]),
                tolerance: 0.01,
                floor: end.n()[i].abs() * 1e-6,
            };
            if let Ok(rep) = analysis::fit_tail(&times, &n, end.n()[i], view.eta[i], &s) {
                tails.insert(name, serde_json::to_value(rep).unwrap_or(Value::Null));
            }
        }
        report["tails"] = Value::Object(tails);
        report["clamping"] = serde_json::to_value(analysis::clamping_diagnostics(&model, std::slice::from_ref(&end))).unwrap_or(Value::Null);
    }
    let mut meta = ctx.meta("fit");
    meta.partial = failures > 0;
    meta.failures = failures;
    let path = write_report(&ctx.dir, "fit", &report, &meta)?;
    verdict(vec![path], failures, 0, ts.len())
}

fn max_rel_error(a: &SteadyState, b: &SteadyState) -> f64 {
    a.n().iter().zip(b.n().iter()).map(|(x, y)| (x - y).abs() / y.abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
}

fn cmd_hierarchy_check(ctx: &Ctx, depths: &[usize]) -> Result<Vec<PathBuf>, RunError> {
    let e = &ctx.cfg.experiment;
    let pumps = log_grid(e.p_min, e.p_max, e.check_points);
    let full = Model::new(&ctx.scene, None);
    let reference = continuation_sweep(&full, &pumps, &ctx.cfg.solver);
    let mut t = Table::new(["depth", "dim", "P", "max_rel_error"].iter().map(|s| s.to_string()).collect());
    let mut summary = Vec::new();
    let mut failures = 0;
    for &depth in depths {
        let basis = build_hierarchy(&ctx.scene, depth)?;
        let model = Model::new(&ctx.scene, Some(&basis));
        let reduced = continuation_sweep(&model, &pumps, &ctx.cfg.solver);
        let mut worst = 0.0f64;
        for ((p, a), b) in pumps.iter().zip(&reduced).zip(&reference) {
            let err = match (a, b) {
                (Ok(a), Ok(b)) => max_rel_error(a, b),
                _ => {
                    failures += 1;
                    f64::NAN
                }
            };
            worst = worst.max(err);
            t.push(vec![depth.into(), basis.dim().into(), (*p).into(), err.into()]);
        }
        summary.push(json!({ "depth": depth, "dim": basis.dim(), "level_ranks": basis.level_ranks(), "max_rel_error": worst }));
    }
    let mut meta = ctx.meta("hierarchy-check");
    meta.partial = failures > 0;
    meta.failures = failures;
    meta.summary = json!(summary);
    let paths = ctx.write("hierarchy_check", &t, &meta)?;
    verdict(paths, failures, 0, pumps.len() * depths.len())
}
