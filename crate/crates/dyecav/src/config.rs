//! Run configuration: strict TOML with defaults, bundled presets and a content hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::ConfigError;
use crate::experiments::{log_grid, QuenchSettings};
use crate::model::{PumpSchedule, SceneParams, Segment};
use crate::solver::IntegratorSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default)]
    pub full_field: bool,
}

fn d_depth() -> usize {
    2
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self { depth: d_depth(), full_field: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub p_initial: f64,
    /// [start, pump] pairs; the first start must be 0.
    pub segments: Vec<[f64; 2]>,
    /// When set, the run is repeated with the final segment starting at each delay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delays: Option<Vec<f64>>,
}

impl ScheduleConfig {
    pub fn schedule(&self) -> Result<PumpSchedule, ConfigError> {
        PumpSchedule::new(self.segments.iter().map(|&[start, pump]| Segment { start, pump }).collect())
    }

    /// One schedule per delay (or just the configured one).
    pub fn variants(&self) -> Result<Vec<(Option<f64>, PumpSchedule)>, ConfigError> {
        let base = self.schedule()?;
        match &self.delays {
            None => Ok(vec![(None, base)]),
            Some(ds) => {
                if base.segments.len() < 2 {
                    return Err(ConfigError::invalid("experiment.schedule.delays", "needs at least two segments"));
                }
                ds.iter()
                    .map(|&d| {
                        let mut segs = base.segments.clone();
                        segs.last_mut().unwrap().start = d;
                        Ok((Some(d), PumpSchedule::new(segs)?))
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    #[serde(default = "d_trace_start")]
    pub p_start: f64,
    #[serde(default = "d_trace_end")]
    pub p_end: f64,
    #[serde(default = "d_trace_t0")]
    pub t_min: f64,
    #[serde(default = "d_trace_t1")]
    pub t_max: f64,
    #[serde(default = "d_trace_samples")]
    pub samples: usize,
}

fn d_trace_start() -> f64 {
    3.16e-4
}
fn d_trace_end() -> f64 {
    0.25
}
fn d_trace_t0() -> f64 {
    1e-2
}
fn d_trace_t1() -> f64 {
    1e5
}
fn d_trace_samples() -> usize {
    281
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self { p_start: d_trace_start(), p_end: d_trace_end(), t_min: d_trace_t0(), t_max: d_trace_t1(), samples: d_trace_samples() }
    }
}

impl TraceConfig {
    pub fn times(&self) -> Vec<f64> {
        log_grid(self.t_min, self.t_max, self.samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Threshold on |d ln n / d ln P| for transition detection.
    #[serde(default = "d_slope")]
    pub slope_threshold: f64,
    /// Window in |P - P_crit| / P_crit for exponent fits.
    #[serde(default = "d_window")]
    pub window: [f64; 2],
    #[serde(default = "d_window_points")]
    pub window_points: usize,
    /// Algebraic window for the tail slope, in units of 1/kappa.
    #[serde(default = "d_tail")]
    pub tail_window: [f64; 2],
}

fn d_slope() -> f64 {
    5.0
}
fn d_window() -> [f64; 2] {
    [0.012, 0.06]
}
fn d_window_points() -> usize {
    10
}
fn d_tail() -> [f64; 2] {
    [10.0, 1e3]
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { slope_threshold: d_slope(), window: d_window(), window_points: d_window_points(), tail_window: d_tail() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_pmin")]
    pub p_min: f64,
    #[serde(default = "d_pmax")]
    pub p_max: f64,
    #[serde(default = "d_points")]
    pub points: usize,
    #[serde(default = "d_fraction")]
    pub quench_fraction: f64,
    #[serde(default = "d_threshold")]
    pub d: f64,
    #[serde(default = "d_tmax")]
    pub t_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_floor: Option<f64>,
    #[serde(default = "d_map")]
    pub map_start: Vec<f64>,
    #[serde(default = "d_map")]
    pub map_end: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub fit: FitConfig,
    /// Pumps for hierarchy-check.
    #[serde(default = "d_check_points")]
    pub check_points: usize,
}

fn d_pmin() -> f64 {
    1e-4
}
fn d_pmax() -> f64 {
    1.0
}
fn d_points() -> usize {
    201
}
fn d_fraction() -> f64 {
    0.01
}
fn d_threshold() -> f64 {
    1e-6
}
fn d_tmax() -> f64 {
    1e6
}
fn d_map() -> Vec<f64> {
    log_grid(1e-4, 1.0, 9)
}
fn d_check_points() -> usize {
    20
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            p_min: d_pmin(),
            p_max: d_pmax(),
            points: d_points(),
            quench_fraction: d_fraction(),
            d: d_threshold(),
            t_max: d_tmax(),
            abs_floor: None,
            map_start: d_map(),
            map_end: d_map(),
            schedule: None,
            trace: TraceConfig::default(),
            fit: FitConfig::default(),
            check_points: d_check_points(),
        }
    }
}

impl ExperimentConfig {
    pub fn grid(&self) -> Vec<f64> {
        log_grid(self.p_min, self.p_max, self.points)
    }

    pub fn quench(&self) -> QuenchSettings {
        QuenchSettings { d: self.d, t_max: self.t_max, abs_floor: self.abs_floor }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "d_dir")]
    pub dir: String,
    #[serde(default = "d_format")]
    pub format: Format,
}

fn d_dir() -> String {
    "out".into()
}
fn d_format() -> Format {
    Format::Csv
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: d_dir(), format: d_format() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneParams,
    #[serde(default)]
    pub solver: IntegratorSettings,
    #[serde(default)]
    pub hierarchy: HierarchyConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

const REQUIRED: [&str; 6] =
    ["scene.max_level", "scene.A_per_level", "scene.E_per_level", "scene.density", "scene.N_per_bin", "scene.Gamma_down"];

/// Known keys per table path; "*" marks a table whose keys are checked one level down.
const KNOWN: &[(&str, &[&str])] = &[
    ("", &["scene", "solver", "hierarchy", "experiment", "output"]),
    ("scene", &["max_level", "A_per_level", "E_per_level", "density", "N_per_bin", "extent", "Gamma_down", "kappa", "coupling_scale"]),
    ("solver", &["rel_tol", "abs_tol_n", "abs_tol_f", "max_step", "dense_output"]),
    ("hierarchy", &["depth", "full_field"]),
    (
        "experiment",
        &[
            "p_min",
            "p_max",
            "points",
            "quench_fraction",
            "d",
            "t_max",
            "abs_floor",
            "map_start",
            "map_end",
            "schedule",
            "trace",
            "fit",
            "check_points",
        ],
    ),
    ("experiment.schedule", &["p_initial", "segments", "delays"]),
    ("experiment.trace", &["p_start", "p_end", "t_min", "t_max", "samples"]),
    ("experiment.fit", &["slope_threshold", "window", "window_points", "tail_window"]),
    ("output", &["dir", "format"]),
];

pub const PRESETS: &[(&str, &str)] = &[
    ("paper_fig1", include_str!("../presets/paper_fig1.toml")),
    ("paper_fig1_21modes", include_str!("../presets/paper_fig1_21modes.toml")),
];

fn check_keys(table: &Table, path: &str) -> Result<(), ConfigError> {
    let known = KNOWN.iter().find(|(p, _)| *p == path).map(|(_, k)| *k);
    for (key, value) in table {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match known {
            Some(k) if k.contains(&key.as_str()) => {}
            _ => return Err(ConfigError::Unknown(full)),
        }
        if let Value::Table(sub) = value {
            if KNOWN.iter().any(|(p, _)| *p == full) {
                check_keys(sub, &full)?;
            }
        }
    }
    Ok(())
}

fn lookup<'a>(table: &'a Table, dotted: &str) -> Option<&'a Value> {
    let mut parts = dotted.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

/// Key path of the value under a byte offset: the enclosing [table] header plus
/// the key on that line.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let before = &text[..offset.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |k| k + 1);
    let line = text[line_start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    let header = before[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    Some(match header {
        Some(h) if !key.is_empty() => format!("{h}.{key}"),
        Some(h) => h,
        None => key.to_string(),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        check_keys(&table, "")?;
        let missing: Vec<String> = REQUIRED.iter().filter(|k| lookup(&table, k).is_none()).map(|k| k.to_string()).collect();
        if !missing.is_empty() {
            return Err(ConfigError::Missing(missing));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().and_then(|sp| key_at(text, sp.start)).unwrap_or_default();
            ConfigError::invalid(&key, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &str) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.into(), msg: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| ConfigError::Preset(name.into()))?;
        Self::parse(text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.scene;
        if s.max_level == 0 {
            return Err(ConfigError::invalid("scene.max_level", "must be at least 1"));
        }
        for (k, v) in [("scene.A_per_level", &s.a_per_level), ("scene.E_per_level", &s.e_per_level)] {
            if v.len() != s.max_level {
                return Err(ConfigError::invalid(k, format!("expected {} entries, got {}", s.max_level, v.len())));
            }
        }
        for (k, v) in [
            ("scene.density", s.density),
            ("scene.N_per_bin", s.n_per_bin),
            ("scene.extent", s.extent),
            ("scene.kappa", s.kappa),
            ("scene.coupling_scale", s.coupling_scale),
        ] {
            if !(v > 0.0) {
                return Err(ConfigError::invalid(k, "must be positive"));
            }
        }
        if !(s.gamma_down >= 0.0) {
            return Err(ConfigError::invalid("scene.Gamma_down", "must be non-negative"));
        }
        self.solver.validate()?;
        let e = &self.experiment;
        if !(e.p_min > 0.0 && e.p_max > e.p_min) {
            return Err(ConfigError::invalid("experiment.p_max", "need 0 < p_min < p_max"));
        }
        if e.points == 0 {
            return Err(ConfigError::invalid("experiment.points", "must be positive"));
        }
        if !(e.d > 0.0 && e.d < 1.0) {
            return Err(ConfigError::invalid("experiment.d", "must lie in (0, 1)"));
        }
        if !(e.t_max > 0.0) {
            return Err(ConfigError::invalid("experiment.t_max", "must be positive"));
        }
        if !(e.quench_fraction > -1.0) {
            return Err(ConfigError::invalid("experiment.quench_fraction", "must exceed -1"));
        }
        for (k, g) in [("experiment.map_start", &e.map_start), ("experiment.map_end", &e.map_end)] {
            if g.is_empty() || g.iter().any(|&p| !(p >= 0.0)) {
                return Err(ConfigError::invalid(k, "needs non-negative pumps"));
            }
        }
        if let Some(s) = &e.schedule {
            s.variants()?;
        }
        if e.fit.window[0] <= 0.0 || e.fit.window[1] <= e.fit.window[0] {
            return Err(ConfigError::invalid("experiment.fit.window", "need 0 < lo < hi"));
        }
        Ok(())
    }

    /// Canonical TOML of the resolved configuration (all defaults filled in).
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.resolved_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_preset_resolves() {
        let c = RunConfig::preset("paper_fig1").unwrap();
        assert_eq!(c.scene.max_level, 5);
        assert_eq!(c.scene.gamma_down, 0.25);
        assert_eq!(c.experiment.d, 1e-6);
        assert_eq!(c.hierarchy.depth, 2);
        let s = crate::model::Scene::build(&c.scene).unwrap();
        assert_eq!(s.n_modes(), 15);
        assert_eq!(s.modes.a[0], 3.8e-12);
    }

    #[test]
    fn six_level_preset_has_21_modes() {
        let c = RunConfig::preset("paper_fig1_21modes").unwrap();
        assert_eq!(crate::model::Scene::build(&c.scene).unwrap().n_modes(), 21);
    }

    #[test]
    fn empty_file_lists_all_required_keys() {
        match RunConfig::parse("") {
            Err(ConfigError::Missing(keys)) => assert_eq!(keys.len(), REQUIRED.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let mut text = PRESETS[0].1.to_string();
        text.push_str("\n[solver]\nrel_toll = 1e-9\n");
        assert_eq!(RunConfig::parse(&text), Err(ConfigError::Unknown("solver.rel_toll".into())));
        let text = PRESETS[0].1.replace("[experiment]", "[experiment.trace]\nfoo = 1\n[experiment]");
        assert_eq!(RunConfig::parse(&text), Err(ConfigError::Unknown("experiment.trace.foo".into())));
    }

    #[test]
    fn type_mismatch_reports_key_path() {
        let text = PRESETS[0].1.replace("max_level = 5", "max_level = \"five\"");
        match RunConfig::parse(&text) {
            Err(ConfigError::Invalid { key, .. }) => assert_eq!(key, "scene.max_level"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        for (name, _) in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            let again = RunConfig::parse(&c.resolved_toml()).unwrap();
            assert_eq!(c, again);
            assert_eq!(c.hash(), again.hash());
        }
    }

    #[test]
    fn schedule_delays_expand() {
        let text = format!(
            "{}\n[experiment.schedule]\np_initial = 3e-4\nsegments = [[0.0, 8e-3], [20.0, 0.25]]\ndelays = [5.0, 50.0]\n",
            PRESETS[0].1
        );
        let c = RunConfig::parse(&text).unwrap();
        let v = c.experiment.schedule.unwrap().variants().unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[1].1.last_switch(), 50.0);
    }

    #[test]
    fn bad_values_are_rejected() {
        let text = PRESETS[0].1.replace("d = 1e-6", "d = 2.0");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Invalid { .. })));
        let text = PRESETS[0].1.replace("density = 1e13", "density = -1.0");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Invalid { .. })));
    }
}
