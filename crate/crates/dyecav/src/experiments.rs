//! Quench protocols: equilibration timing, 1D sweeps, 2D maps, pump schedules
//! and long traces for tail analysis.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SolverError;
use crate::model::{PumpSchedule, Segment};
use crate::solver::{continuation_sweep, find_steady, integrate, Control, DenseStep, Dynamics, IntegratorSettings, Model, SteadyState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuenchSettings {
    /// Relative threshold on every cavity mode.
    #[serde(default = "d_threshold")]
    pub d: f64,
    #[serde(default = "d_t_max")]
    pub t_max: f64,
    /// Optional floor added to the steady population in the denominator.
    #[serde(default)]
    pub abs_floor: Option<f64>,
}

fn d_threshold() -> f64 {
    1e-6
}
fn d_t_max() -> f64 {
    1e6
}

impl Default for QuenchSettings {
    fn default() -> Self {
        Self { d: d_threshold(), t_max: d_t_max(), abs_floor: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRecord {
    pub n_start: f64,
    pub n_end: f64,
    pub n_peak: f64,
    pub t_peak: f64,
    /// Time after the last switch at which this mode last entered the threshold band.
    pub t_settle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuenchRecord {
    pub p_start: f64,
    pub p_end: f64,
    /// Equilibration time (first crossing), measured from the last pump switch.
    pub t_eq: f64,
    pub t_first: f64,
    /// Crossing after which the deviation stayed below d at the next sample.
    pub t_last: f64,
    /// Schedule start to equilibration.
    pub total_time: f64,
    pub d: f64,
    pub converged: bool,
    /// Largest relative deviation right after the last switch.
    pub delta0: f64,
    pub modes: Vec<ModeRecord>,
    /// (time after switch, max relative deviation) at step ends.
    pub deviation: Vec<(f64, f64)>,
    pub error: Option<String>,
}

impl QuenchRecord {
    fn failed(p_start: f64, p_end: f64, d: f64, err: &SolverError) -> Self {
        Self {
            p_start,
            p_end,
            t_eq: f64::NAN,
            t_first: f64::NAN,
            t_last: f64::NAN,
            total_time: f64::NAN,
            d,
            converged: false,
            delta0: f64::NAN,
            modes: Vec::new(),
            deviation: Vec::new(),
            error: Some(err.to_string()),
        }
    }
}

/// Tracks the relative deviation from the target steady state along a run.
struct Watcher<'a> {
    target: &'a DVector<f64>,
    denom: Vec<f64>,
    d: f64,
    t_switch: f64,
    m: usize,
    prev_dev: Option<f64>,
    prev_mode_dev: Vec<f64>,
    candidate: Option<f64>,
    first: Option<f64>,
    confirmed: Option<f64>,
    delta0: f64,
    peaks: Vec<(f64, f64)>,
    settle: Vec<f64>,
    deviation: Vec<(f64, f64)>,
}

impl<'a> Watcher<'a> {
    fn new(target: &'a DVector<f64>, m: usize, q: &QuenchSettings, t_switch: f64, y0: &DVector<f64>) -> Self {
        let floor = q.abs_floor.unwrap_or(0.0);
        let denom = (0..m).map(|i| target[i].abs() + floor).collect();
        Self {
            target,
            denom,
            d: q.d,
            t_switch,
            m,
            prev_dev: None,
            prev_mode_dev: vec![f64::INFINITY; m],
            candidate: None,
            first: None,
            confirmed: None,
            delta0: f64::NAN,
            peaks: (0..m).map(|i| (y0[i], 0.0)).collect(),
            settle: vec![0.0; m],
            deviation: Vec::new(),
        }
    }

    fn mode_dev(&self, i: usize, n: f64) -> f64 {
        let diff = (n - self.target[i]).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.denom[i]
        }
    }

    fn dev_at(&self, ds: &DenseStep, t: f64) -> f64 {
        (0..self.m).map(|i| self.mode_dev(i, ds.eval_component(i, t))).fold(0.0, f64::max)
    }

    fn dev_vec(&self, y: &DVector<f64>) -> f64 {
        (0..self.m).map(|i| self.mode_dev(i, y[i])).fold(0.0, f64::max)
    }

    /// Bisect [lo, hi] for the point where g changes from > d to <= d.
    fn bisect(&self, ds: &DenseStep, g: impl Fn(f64) -> f64) -> f64 {
        let (mut lo, mut hi) = (ds.t0, ds.t1());
        while hi - lo > 1e-7 * hi.abs().max(1e-12) {
            let mid = 0.5 * (lo + hi);
            if g(mid) > self.d {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    fn observe(&mut self, ds: &DenseStep) -> Control {
        // peaks over the whole run, sampled inside the step as well
        for k in 1..=4 {
            let t = ds.t0 + ds.h * k as f64 / 4.0;
            for i in 0..self.m {
                let v = ds.eval_component(i, t);
                if v > self.peaks[i].0 {
                    self.peaks[i] = (v, t - self.t_switch);
                }
            }
        }
        if ds.t1() <= self.t_switch {
            return Control::Continue;
        }
        if self.prev_dev.is_none() {
            let d0 = self.dev_vec(&ds.y0);
            self.delta0 = d0;
            self.deviation.push((ds.t0 - self.t_switch, d0));
            for i in 0..self.m {
                self.prev_mode_dev[i] = self.mode_dev(i, ds.y0[i]);
            }
            if d0 <= self.d {
                self.candidate = Some(ds.t0);
                self.first = Some(ds.t0);
            }
            self.prev_dev = Some(d0);
        }
        let dev1 = self.dev_vec(&ds.y1);
        self.deviation.push((ds.t1() - self.t_switch, dev1));
        for i in 0..self.m {
            let di = self.mode_dev(i, ds.y1[i]);
            if di <= self.d && self.prev_mode_dev[i] > self.d {
                let t = self.bisect(ds, |t| self.mode_dev(i, ds.eval_component(i, t)));
                self.settle[i] = t - self.t_switch;
            }
            self.prev_mode_dev[i] = di;
        }
        let dev0 = self.prev_dev.unwrap();
        let mut stop = false;
        if dev1 <= self.d {
            if dev0 > self.d {
                let t = self.bisect(ds, |t| self.dev_at(ds, t));
                self.candidate = Some(t);
                if self.first.is_none() {
                    self.first = Some(t);
                }
            } else if let Some(c) = self.candidate {
                self.confirmed = Some(c);
                stop = true;
            }
        } else {
            self.candidate = None;
        }
        self.prev_dev = Some(dev1);
        if stop {
            Control::Stop
        } else {
            Control::Continue
        }
    }
}

/// Integrate `schedule` from `y0` and time equilibration toward `target`, measured
/// from the last pump switch.
pub fn run_quench(
    model: &Model,
    y0: &DVector<f64>,
    schedule: &PumpSchedule,
    target: &SteadyState,
    q: &QuenchSettings,
    settings: &IntegratorSettings,
) -> Result<QuenchRecord, SolverError> {
    let m = model.n_modes();
    let t_switch = schedule.last_switch();
    let mut w = Watcher::new(&target.y, m, q, t_switch, y0);
    let t_end = t_switch + q.t_max;
    let tr = integrate(model, y0, schedule, t_end, settings, |ds| w.observe(ds))?;
    let converged = w.confirmed.is_some();
    let t_first = w.first.map_or(f64::NAN, |t| t - t_switch);
    let t_last = w.confirmed.map_or(f64::NAN, |t| t - t_switch);
    let t_eq = if converged { t_first } else { q.t_max };
    let modes = (0..m)
        .map(|i| ModeRecord {
            n_start: y0[i],
            n_end: target.y[i],
            n_peak: w.peaks[i].0.max(tr.y[i]),
            t_peak: w.peaks[i].1,
            t_settle: w.settle[i],
        })
        .collect();
    Ok(QuenchRecord {
        p_start: schedule.segments[0].pump,
        p_end: schedule.final_pump(),
        t_eq,
        t_first,
        t_last,
        total_time: t_switch + t_eq,
        d: q.d,
        converged,
        delta0: w.delta0,
        modes,
        deviation: w.deviation,
        error: None,
    })
}

/// Quench from the steady state at `p_start` to `p_end`. `guess` seeds the first
/// steady-state solve; it should be close to the steady state at `p_start`.
pub fn equilibration_time(
    model: &Model,
    p_start: f64,
    p_end: f64,
    guess: &DVector<f64>,
    q: &QuenchSettings,
    settings: &IntegratorSettings,
) -> Result<QuenchRecord, SolverError> {
    let ss0 = find_steady(model, p_start, guess, settings)?;
    let ss1 = find_steady(model, p_end, &ss0.y, settings)?;
    quench_between(model, &ss0, &ss1, q, settings)
}

pub fn quench_between(
    model: &Model,
    start: &SteadyState,
    end: &SteadyState,
    q: &QuenchSettings,
    settings: &IntegratorSettings,
) -> Result<QuenchRecord, SolverError> {
    let mut rec = run_quench(model, &start.y, &PumpSchedule::constant(end.p), end, q, settings)?;
    rec.p_start = start.p;
    Ok(rec)
}

/// Steady states for an arbitrary set of pumps, solved by continuation in
/// ascending order and returned in input order.
pub fn steady_states(model: &Model, pumps: &[f64], settings: &IntegratorSettings) -> Vec<Result<SteadyState, SolverError>> {
    let mut order: Vec<usize> = (0..pumps.len()).collect();
    order.sort_by(|&a, &b| pumps[a].total_cmp(&pumps[b]));
    let sorted: Vec<f64> = order.iter().map(|&k| pumps[k]).collect();
    let solved = continuation_sweep(model, &sorted, settings);
    let mut out: Vec<Option<Result<SteadyState, SolverError>>> = (0..pumps.len()).map(|_| None).collect();
    for (k, r) in order.into_iter().zip(solved) {
        out[k] = Some(r);
    }
    out.into_iter().map(|r| r.unwrap()).collect()
}

/// For each P, a quench P -> P (1 + fraction). Quenches run in parallel; the
/// output order follows the grid.
pub fn sweep_1d(
    model: &Model,
    grid: &[f64],
    fraction: f64,
    q: &QuenchSettings,
    settings: &IntegratorSettings,
) -> Vec<QuenchRecord> {
    let mut pumps: Vec<f64> = grid.to_vec();
    pumps.extend(grid.iter().map(|p| p * (1.0 + fraction)));
    let ss = steady_states(model, &pumps, settings);
    let n = grid.len();
    (0..n)
        .into_par_iter()
        .map(|k| {
            let (p0, p1) = (grid[k], grid[k] * (1.0 + fraction));
            match (&ss[k], &ss[n + k]) {
                (Ok(a), Ok(b)) => quench_between(model, a, b, q, settings).unwrap_or_else(|e| QuenchRecord::failed(p0, p1, q.d, &e)),
                (Err(e), _) | (_, Err(e)) => QuenchRecord::failed(p0, p1, q.d, e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuenchMap {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    /// Row-major: t_eq[r][c] for start r, end c.
    pub t_eq: Vec<Vec<f64>>,
    pub converged: Vec<Vec<bool>>,
    pub start_labels: Vec<char>,
    pub end_labels: Vec<char>,
}

pub fn quench_map(
    model: &Model,
    starts: &[f64],
    ends: &[f64],
    p_crit: &[f64],
    q: &QuenchSettings,
    settings: &IntegratorSettings,
) -> QuenchMap {
    let mut pumps = starts.to_vec();
    pumps.extend_from_slice(ends);
    let ss = steady_states(model, &pumps, settings);
    let ns = starts.len();
    let cells: Vec<(usize, usize)> = (0..ns).flat_map(|r| (0..ends.len()).map(move |c| (r, c))).collect();
    let results: Vec<(f64, bool)> = cells
        .par_iter()
        .map(|&(r, c)| {
            if starts[r] == ends[c] {
                return (0.0, true);
            }
            match (&ss[r], &ss[ns + c]) {
                (Ok(a), Ok(b)) => match quench_between(model, a, b, q, settings) {
                    Ok(rec) => (rec.t_eq, rec.converged),
                    Err(_) => (f64::NAN, false),
                },
                _ => (f64::NAN, false),
            }
        })
        .collect();
    let mut t_eq = vec![vec![0.0; ends.len()]; ns];
    let mut converged = vec![vec![false; ends.len()]; ns];
    for (&(r, c), &(t, ok)) in cells.iter().zip(&results) {
        t_eq[r][c] = t;
        converged[r][c] = ok;
    }
    QuenchMap {
        p_start: starts.to_vec(),
        p_end: ends.to_vec(),
        t_eq,
        converged,
        start_labels: starts.iter().map(|&p| interval_label(p, p_crit)).collect(),
        end_labels: ends.iter().map(|&p| interval_label(p, p_crit)).collect(),
    }
}

/// 'A' below the first critical pump, 'B' between the first and second, ...
pub fn interval_label(p: f64, p_crit: &[f64]) -> char {
    let k = p_crit.iter().filter(|&&c| p > c).count();
    (b'A' + k.min(25) as u8) as char
}

/// Start from the steady state at `p_initial` and follow the schedule.
pub fn run_schedule(
    model: &Model,
    p_initial: f64,
    schedule: &PumpSchedule,
    guess: &DVector<f64>,
    q: &QuenchSettings,
    settings: &IntegratorSettings,
) -> Result<QuenchRecord, SolverError> {
    let ss0 = find_steady(model, p_initial, guess, settings)?;
    let target = find_steady(model, schedule.final_pump(), &ss0.y, settings)?;
    let mut rec = run_quench(model, &ss0.y, schedule, &target, q, settings)?;
    rec.p_start = p_initial;
    Ok(rec)
}

/// Quench to `p_mid`, then to `p_end` after `delay`.
pub fn two_step(p_mid: f64, p_end: f64, delay: f64) -> PumpSchedule {
    PumpSchedule { segments: vec![Segment { start: 0.0, pump: p_mid }, Segment { start: delay, pump: p_end }] }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub p_start: f64,
    pub p_end: f64,
    pub times: Vec<f64>,
    /// n[k][i]: mode i at times[k].
    pub n: Vec<Vec<f64>>,
    pub n_end: Vec<f64>,
}

/// Per-mode populations at `sample_times` after a quench between steady states.
pub fn big_quench_trace(
    model: &Model,
    start: &SteadyState,
    end: &SteadyState,
    sample_times: &[f64],
    settings: &IntegratorSettings,
) -> Result<Trace, SolverError> {
    let m = model.n_modes();
    let mut times: Vec<f64> = sample_times.to_vec();
    times.sort_by(f64::total_cmp);
    let mut n = Vec::with_capacity(times.len());
    let mut next = 0;
    while next < times.len() && times[next] <= 0.0 {
        n.push(start.y.rows(0, m).iter().copied().collect());
        next += 1;
    }
    let t_end = times.last().copied().unwrap_or(0.0);
    if t_end > 0.0 {
        integrate(model, &start.y, &PumpSchedule::constant(end.p), t_end, settings, |ds| {
            while next < times.len() && times[next] <= ds.t1() {
                n.push((0..m).map(|i| ds.eval_component(i, times[next])).collect());
                next += 1;
            }
            if next == times.len() {
                Control::Stop
            } else {
                Control::Continue
            }
        })?;
    }
    Ok(Trace { p_start: start.p, p_end: end.p, times, n, n_end: end.y.rows(0, m).iter().copied().collect() })
}

pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points).map(|k| (a + (b - a) * k as f64 / (points - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Scene, SceneParams};

    #[test]
    fn labels_follow_criticals() {
        let pc = [1e-3, 1e-2, 0.1, 0.3];
        assert_eq!(interval_label(1e-4, &pc), 'A');
        assert_eq!(interval_label(5e-3, &pc), 'B');
        assert_eq!(interval_label(0.2, &pc), 'D');
        assert_eq!(interval_label(10.0, &pc), 'E');
        assert_eq!(interval_label(1.0, &[]), 'A');
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-4, 1e2, 7);
        assert_eq!(g.len(), 7);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[6] / 1e2 - 1.0).abs() < 1e-12);
        assert!((g[1] / 1e-3 - 1.0).abs() < 1e-12);
        assert_eq!(log_grid(3.0, 5.0, 1), vec![3.0]);
    }

    #[test]
    fn identical_pumps_equilibrate_immediately() {
        let s = Scene::build(&SceneParams::rhodamine(1.0)).unwrap();
        let model = Model::new(&s, None);
        let st = IntegratorSettings::default();
        let ss = find_steady(&model, 1e-3, &model.vacuum(), &st);
        // vacuum is far from the steady state; Newton falls back to integration
        let ss = ss.unwrap();
        let rec = quench_between(&model, &ss, &ss, &QuenchSettings::default(), &st).unwrap();
        assert!(rec.converged);
        assert_eq!(rec.t_eq, 0.0);
    }

    #[test]
    fn trace_with_single_sample() {
        let s = Scene::build(&SceneParams::rhodamine(1.0)).unwrap();
        let model = Model::new(&s, None);
        let st = IntegratorSettings::default();
        let a = find_steady(&model, 1e-3, &model.vacuum(), &st).unwrap();
        let b = find_steady(&model, 2e-3, &a.y, &st).unwrap();
        let tr = big_quench_trace(&model, &a, &b, &[5.0], &st).unwrap();
        assert_eq!(tr.n.len(), 1);
        assert_eq!(tr.n[0].len(), s.n_modes());
    }
}
