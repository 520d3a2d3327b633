//! Post-processing: transitions, critical exponents, tail fits, clamping and
//! the comparison between threshold and exponential decay times.

use serde::{Deserialize, Serialize};

use crate::error::SolverError;
use crate::experiments::QuenchRecord;
use crate::kernel::effective_view;
use crate::model::ModeIndex;
use crate::solver::{find_steady, IntegratorSettings, Model, SteadyState};

/// Steady populations above this count as condensed (reporting only).
pub const CONDENSED: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionKind {
    Condensation,
    Decondensation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub p_crit: f64,
    pub mode: ModeIndex,
    pub kind: TransitionKind,
    /// Largest |d ln n / d ln P| seen on the coarse grid.
    pub slope: f64,
    /// Coarse grid points that bracketed the jump.
    pub grid_bracket: (f64, f64),
    /// Final refined bracket.
    pub bracket: (f64, f64),
    /// Width of the bracket after each refinement.
    pub widths: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectSettings {
    pub slope_threshold: f64,
    /// Refine until (hi - lo) / lo is at most this.
    pub rel_width: f64,
}

impl Default for DetectSettings {
    fn default() -> Self {
        Self { slope_threshold: 5.0, rel_width: 1e-3 }
    }
}

fn ln_pop(n: f64) -> f64 {
    n.max(1e-300).ln()
}

/// Locate steep rises and drops in the steady populations of an ascending sweep.
/// Adjacent steep grid intervals are merged into one transition, attributed to the
/// mode with the largest change in ln n across the merged run.
pub fn detect_transitions(
    model: &Model,
    sweep: &[SteadyState],
    settings: &IntegratorSettings,
    opts: &DetectSettings,
) -> Result<Vec<Transition>, SolverError> {
    if sweep.len() < 3 {
        return Ok(Vec::new());
    }
    let m = sweep[0].n().len();
    let slope = |k: usize, i: usize| {
        (ln_pop(sweep[k + 1].n()[i]) - ln_pop(sweep[k].n()[i])) / (sweep[k + 1].p.ln() - sweep[k].p.ln())
    };
    let steep: Vec<bool> = (0..sweep.len() - 1).map(|k| (0..m).any(|i| slope(k, i).abs() > opts.slope_threshold)).collect();

    let mut out = Vec::new();
    let mut k = 0;
    while k < steep.len() {
        if !steep[k] {
            k += 1;
            continue;
        }
        let start = k;
        while k < steep.len() && steep[k] {
            k += 1;
        }
        // run covers grid intervals start..k
        let (mut best_mode, mut best_jump) = (0, 0.0f64);
        for i in 0..m {
            let jump = ln_pop(sweep[k].n()[i]) - ln_pop(sweep[start].n()[i]);
            // degenerate partners jump by the same amount up to rounding; keep the first
            if jump.abs() > best_jump.abs() * (1.0 + 1e-6) {
                best_mode = i;
                best_jump = jump;
            }
        }
        let (mut seg, mut max_slope) = (start, 0.0f64);
        for s in start..k {
            let v = slope(s, best_mode).abs();
            if v > max_slope {
                seg = s;
                max_slope = v;
            }
        }
        let kind = if best_jump > 0.0 { TransitionKind::Condensation } else { TransitionKind::Decondensation };
        let (p_crit, bracket, widths) = refine(model, &sweep[seg], &sweep[seg + 1], best_mode, settings, opts.rel_width)?;
        out.push(Transition {
            p_crit,
            mode: model_mode(model, best_mode),
            kind,
            slope: max_slope,
            grid_bracket: (sweep[seg].p, sweep[seg + 1].p),
            bracket,
            widths,
        });
    }
    Ok(out)
}

fn model_mode(model: &Model, i: usize) -> ModeIndex {
    model.scene().modes.modes[i]
}

/// Bisection in ln P on whether ln n_i has passed the midpoint of its values at
/// the two bracket ends.
fn refine(
    model: &Model,
    lo: &SteadyState,
    hi: &SteadyState,
    mode: usize,
    settings: &IntegratorSettings,
    rel_width: f64,
) -> Result<(f64, (f64, f64), Vec<f64>), SolverError> {
    let target = 0.5 * (ln_pop(lo.n()[mode]) + ln_pop(hi.n()[mode]));
    let rising = ln_pop(hi.n()[mode]) > ln_pop(lo.n()[mode]);
    let (mut a, mut b) = (lo.clone(), hi.clone());
    let mut widths = vec![(b.p - a.p) / a.p];
    while (b.p - a.p) / a.p > rel_width {
        let p = (a.p * b.p).sqrt();
        let mid = find_steady(model, p, &a.y, settings)?;
        let past = (ln_pop(mid.n()[mode]) > target) == rising;
        if past {
            b = mid;
        } else {
            a = mid;
        }
        widths.push((b.p - a.p) / a.p);
    }
    Ok(((a.p * b.p).sqrt(), (a.p, b.p), widths))
}

/// Least-squares line y = a + b x with Pearson r.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub r: f64,
}

pub fn line_fit(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let slope = sxy / sxx;
    let r = if syy == 0.0 { 1.0f64.copysign(slope) } else { (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0) };
    LineFit { intercept: my - slope * mx, slope, r }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    /// Exponent of t_eq in |P - P_crit|; -1 for a simple critical divergence.
    pub exponent: f64,
    /// Pearson r of the rate 1/t_eq against P (negative where the rate falls with P).
    pub r: f64,
    /// Pearson r of the log-log fit.
    pub r_loglog: f64,
    /// Window in |P - P_crit| / P_crit.
    pub window: (f64, f64),
    pub p_crit: f64,
    pub points: usize,
}

/// Fit t_eq ~ |P - P_crit|^exponent on each side of a transition. `records`
/// are (P, t_eq) pairs; only finite t_eq inside the relative window are used.
pub fn fit_critical_exponent(
    records: &[(f64, f64)],
    p_crit: f64,
    window: (f64, f64),
) -> Result<(ExponentFit, ExponentFit), SolverError> {
    let side = |below: bool| -> Result<ExponentFit, SolverError> {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .copied()
            .filter(|&(p, t)| {
                let x = (p - p_crit).abs() / p_crit;
                t.is_finite() && t > 0.0 && (p < p_crit) == below && x >= window.0 && x <= window.1
            })
            .collect();
        if pts.len() < 6 {
            let which = if below { "below" } else { "above" };
            return Err(SolverError::Fit(format!("{} points {which} P_crit = {p_crit:e}, need 6", pts.len())));
        }
        let lx: Vec<f64> = pts.iter().map(|&(p, _)| (p - p_crit).abs().ln()).collect();
        let ly: Vec<f64> = pts.iter().map(|&(_, t)| t.ln()).collect();
        let ll = line_fit(&lx, &ly);
        let ps: Vec<f64> = pts.iter().map(|&(p, _)| p).collect();
        let rates: Vec<f64> = pts.iter().map(|&(_, t)| 1.0 / t).collect();
        let lin = line_fit(&ps, &rates);
        Ok(ExponentFit { exponent: ll.slope, r: lin.r, r_loglog: ll.r, window, p_crit, points: pts.len() })
    };
    Ok((side(true)?, side(false)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    /// Log-log slope of n over the algebraic window.
    pub slope: f64,
    pub slope_r: f64,
    pub window: (f64, f64),
    /// Decay rate used for the exponential prediction.
    pub eta: f64,
    /// Rate fitted to ln(n - n_eq) over the matched range.
    pub eta_fit: f64,
    /// Anchor time and last matched time of the exponential prediction.
    pub matched: (f64, f64),
    pub decades_matched: f64,
    /// Largest pointwise |log10 dev_pred - log10 dev| / max(|log10 dev|, 1) inside the match.
    pub max_mismatch: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailSettings {
    pub window: (f64, f64),
    /// Pointwise tolerance on the log deviation.
    pub tolerance: f64,
    /// Deviations below this are treated as solver noise and not compared.
    pub floor: f64,
}

/// Algebraic slope over a window and the longest stretch on which the frozen-rate
/// exponential n_eq + (n(t0) - n_eq) exp(-eta (t - t0)) tracks the trace.
pub fn fit_tail(times: &[f64], n: &[f64], n_eq: f64, eta: f64, s: &TailSettings) -> Result<TailReport, SolverError> {
    let idx: Vec<usize> = (0..times.len()).filter(|&k| times[k] >= s.window.0 && times[k] <= s.window.1 && n[k] > 0.0).collect();
    if idx.len() < 3 {
        return Err(SolverError::Fit(format!("window {:?} holds {} samples", s.window, idx.len())));
    }
    let lt: Vec<f64> = idx.iter().map(|&k| times[k].ln()).collect();
    let ln: Vec<f64> = idx.iter().map(|&k| n[k].ln()).collect();
    let alg = line_fit(&lt, &ln);

    let dev: Vec<f64> = n.iter().map(|&v| (v - n_eq).abs()).collect();
    let usable = |k: usize| dev[k] > s.floor;
    let (mut best, mut best_span, mut best_mis) = (0.0f64, (f64::NAN, f64::NAN), 0.0f64);
    let mut best_range = (0, 0);
    for a in 0..times.len() {
        if !usable(a) {
            continue;
        }
        let mut last = a;
        let mut mis = 0.0f64;
        for k in a + 1..times.len() {
            if !usable(k) {
                break;
            }
            let pred = dev[a] * (-eta * (times[k] - times[a])).exp();
            let e = (pred.log10() - dev[k].log10()).abs() / dev[k].log10().abs().max(1.0);
            if e > s.tolerance {
                break;
            }
            last = k;
            mis = mis.max(e);
        }
        let decades = (dev[a] / dev[last]).log10();
        if decades > best {
            best = decades;
            best_span = (times[a], times[last]);
            best_mis = mis;
            best_range = (a, last);
        }
    }
    let eta_fit = if best_range.1 > best_range.0 {
        let t: Vec<f64> = (best_range.0..=best_range.1).map(|k| times[k]).collect();
        let l: Vec<f64> = (best_range.0..=best_range.1).map(|k| dev[k].ln()).collect();
        -line_fit(&t, &l).slope
    } else {
        f64::NAN
    };
    Ok(TailReport {
        slope: alg.slope,
        slope_r: alg.r,
        window: s.window,
        eta,
        eta_fit,
        matched: best_span,
        decades_matched: best,
        max_mismatch: best_mis,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampRow {
    pub p: f64,
    /// u_i / u_crit_i per mode.
    pub ratio: Vec<f64>,
    pub eta: Vec<f64>,
    pub condensed: Vec<bool>,
}

pub fn clamping_diagnostics(model: &Model, sweep: &[SteadyState]) -> Vec<ClampRow> {
    sweep
        .iter()
        .map(|ss| {
            let v = effective_view(&ss.state, model.scene(), model.basis());
            ClampRow {
                p: ss.p,
                ratio: v.u.iter().zip(v.u_crit.iter()).map(|(u, c)| u / c).collect(),
                eta: v.eta.iter().copied().collect(),
                condensed: ss.n().iter().map(|&n| n > CONDENSED).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDefRow {
    pub p_end: f64,
    pub t_eq: f64,
    /// Decay time from a log-linear fit of the deviation.
    pub tau: f64,
    pub ratio: f64,
    /// ln(delta0 / d), the ratio for a pure exponential.
    pub predicted: f64,
    /// Coefficient of determination of the log-linear fit.
    pub r2: f64,
    pub exponential: bool,
}

/// Single-exponential fits pass when r^2 of ln(deviation) against t is at least this.
pub const EXPONENTIAL_R2: f64 = 0.999;

/// Threshold time against exponential decay time per record. The fit uses the
/// recorded deviation between d and delta0/10, excluding the initial transient.
pub fn compare_time_definitions(records: &[QuenchRecord]) -> Vec<TimeDefRow> {
    records
        .iter()
        .filter(|r| r.converged)
        .map(|r| {
            let pts: Vec<(f64, f64)> = r
                .deviation
                .iter()
                .copied()
                .filter(|&(t, v)| t > 0.0 && v > r.d && v < 0.1 * r.delta0)
                .collect();
            let (tau, r2) = if pts.len() >= 3 {
                let t: Vec<f64> = pts.iter().map(|p| p.0).collect();
                let l: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
                let f = line_fit(&t, &l);
                (-1.0 / f.slope, f.r * f.r)
            } else {
                (f64::NAN, 0.0)
            };
            TimeDefRow {
                p_end: r.p_end,
                t_eq: r.t_eq,
                tau,
                ratio: r.t_eq / tau,
                predicted: (r.delta0 / r.d).ln(),
                r2,
                exponential: tau > 0.0 && r2 >= EXPONENTIAL_R2,
            }
        })
        .collect()
}

/// Relative dispersion (std / mean) of the ratio over exponential rows.
pub fn ratio_dispersion(rows: &[TimeDefRow]) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.exponential).map(|r| r.ratio).collect();
    if v.len() < 2 {
        return f64::NAN;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    var.sqrt() / mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::log_grid;

    #[test]
    fn exact_power_law_has_unit_exponent() {
        let pc = 0.1;
        let mut recs = Vec::new();
        for x in log_grid(0.01, 0.1, 8) {
            recs.push((pc * (1.0 - x), 3.0 / (pc * x)));
            recs.push((pc * (1.0 + x), 5.0 / (pc * x)));
        }
        let (below, above) = fit_critical_exponent(&recs, pc, (0.01, 0.1)).unwrap();
        assert!((below.exponent + 1.0).abs() < 1e-12);
        assert!((above.exponent + 1.0).abs() < 1e-12);
        assert!((below.r + 1.0).abs() < 1e-12);
        assert!((above.r - 1.0).abs() < 1e-12);
        assert_eq!(below.points, 8);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let recs: Vec<(f64, f64)> = (1..5).map(|k| (1.0 + 0.01 * k as f64, 1.0)).collect();
        assert!(matches!(fit_critical_exponent(&recs, 1.0, (0.0, 1.0)), Err(SolverError::Fit(_))));
    }

    #[test]
    fn algebraic_slope_is_recovered() {
        let t = log_grid(1.0, 1e4, 81);
        let n: Vec<f64> = t.iter().map(|t| 7e12 * t.powf(-1.5)).collect();
        let s = TailSettings { window: (10.0, 1e3), tolerance: 0.01, floor: 0.0 };
        let r = fit_tail(&t, &n, 0.0, 1.0, &s).unwrap();
        assert!((r.slope + 1.5).abs() < 1e-6);
    }

    #[test]
    fn pure_exponential_matches_everywhere() {
        let eta = 0.0123;
        let t: Vec<f64> = (0..200).map(|k| 10.0 * k as f64).collect();
        let n: Vec<f64> = t.iter().map(|t| 449.0 + 1e12 * (-eta * t).exp()).collect();
        let s = TailSettings { window: (10.0, 1e3), tolerance: 0.01, floor: 1e-3 };
        let r = fit_tail(&t, &n, 449.0, eta, &s).unwrap();
        assert!(r.max_mismatch < 1e-6);
        assert!((r.eta_fit - eta).abs() / eta < 1e-6);
        assert!(r.decades_matched > 7.0);
    }

    #[test]
    fn window_without_samples_is_an_error() {
        let s = TailSettings { window: (1e5, 1e6), tolerance: 0.01, floor: 0.0 };
        assert!(fit_tail(&[1.0, 2.0], &[1.0, 1.0], 0.0, 1.0, &s).is_err());
    }

    fn exp_record(tau: f64, delta0: f64, d: f64) -> QuenchRecord {
        let t_eq = tau * (delta0 / d).ln();
        QuenchRecord {
            p_start: 1.0,
            p_end: 1.01,
            t_eq,
            t_first: t_eq,
            t_last: t_eq,
            total_time: t_eq,
            d,
            converged: true,
            delta0,
            modes: Vec::new(),
            deviation: (0..60).map(|k| k as f64 * t_eq / 50.0).map(|t| (t, delta0 * (-t / tau).exp())).collect(),
            error: None,
        }
    }

    #[test]
    fn exponential_ratio_is_log_of_threshold_ratio() {
        let rows = compare_time_definitions(&[exp_record(1.0, 0.01, 1e-6), exp_record(3.0, 0.01, 1e-6)]);
        for r in &rows {
            assert!(r.exponential);
            assert!((r.ratio - r.predicted).abs() < 1e-9 * r.predicted);
            assert!((r.predicted - (1e4f64).ln()).abs() < 1e-12);
        }
        assert!(ratio_dispersion(&rows) < 1e-9);
    }

    #[test]
    fn line_fit_handles_constant_data() {
        let f = line_fit(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]);
        assert!((f.slope - 2.0).abs() < 1e-15 && (f.r - 1.0).abs() < 1e-15);
    }
}
