use nalgebra::DVector;

use super::{integrate, Control, Dynamics, IntegratorSettings, Model};
use crate::error::SolverError;
use crate::kernel::SystemState;
use crate::model::PumpSchedule;

const MAX_NEWTON: usize = 60;
const MAX_HALVINGS: usize = 8;
/// Newton stops once every component moves less than this (relative) amount.
const STEP_RTOL: f64 = 1e-13;
const STEP_ATOL_N: f64 = 1e-12;
const STEP_ATOL_F: f64 = 1e-16;
/// Scaled residual (rates per unit population) treated as converged when the
/// line search can make no further progress.
const STALL_MERIT: f64 = 1e-11;

#[derive(Debug, Clone)]
pub struct SteadyState {
    pub state: SystemState,
    pub y: DVector<f64>,
    pub p: f64,
    /// ||rhs|| / ||y||, Euclidean.
    pub residual_norm: f64,
    pub converged: bool,
    pub newton_iterations: usize,
    /// Scaled residual after each Newton iterate.
    pub residual_history: Vec<f64>,
    pub used_integration: bool,
}

impl SteadyState {
    pub fn n(&self) -> &DVector<f64> {
        &self.state.n
    }
}

fn relative_residual(f: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let fy = f.norm();
    if fy == 0.0 {
        0.0
    } else {
        fy / y.norm().max(f64::MIN_POSITIVE)
    }
}

fn merit(f: &DVector<f64>, scale: &DVector<f64>) -> f64 {
    f.iter().zip(scale.iter()).map(|(a, s)| (a / s).powi(2)).sum()
}

fn clamp_box(m: usize, y: &mut DVector<f64>, hierarchical: bool) {
    for k in 0..y.len() {
        if k < m {
            y[k] = y[k].max(0.0);
        } else if !hierarchical {
            y[k] = y[k].clamp(0.0, 1.0);
        }
    }
}

struct NewtonOutcome {
    y: DVector<f64>,
    converged: bool,
    iterations: usize,
    history: Vec<f64>,
}

fn newton<D: Dynamics>(sys: &D, p: f64, guess: &DVector<f64>) -> Result<NewtonOutcome, SolverError> {
    let m = sys.n_modes();
    let mut y = guess.clone();
    clamp_box(m, &mut y, sys.hierarchical());
    let mut history = Vec::new();
    for it in 0..MAX_NEWTON {
        let f = sys.rhs(p, &y);
        let scale = DVector::from_fn(y.len(), |k, _| if k < m { y[k].abs().max(1.0) } else { 1.0 });
        let phi = merit(&f, &scale);
        history.push(phi.sqrt());
        if phi == 0.0 {
            return Ok(NewtonOutcome { y, converged: true, iterations: it, history });
        }
        let lu = match sys.factor(p, &y, 0.0) {
            Ok(lu) => lu,
            Err(SolverError::Singular(_)) => return Ok(NewtonOutcome { y, converged: false, iterations: it, history }),
            Err(e) => return Err(e),
        };
        // (0 I - J) dx = f  gives the Newton step dx = -J^{-1} f
        let dx = lu.solve(&f);
        if dx.iter().any(|v| !v.is_finite()) {
            return Ok(NewtonOutcome { y, converged: false, iterations: it, history });
        }
        let small = (0..y.len()).all(|k| {
            let atol = if k < m { STEP_ATOL_N } else { STEP_ATOL_F };
            dx[k].abs() <= atol + STEP_RTOL * y[k].abs()
        });
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &y + &dx * lambda;
            if sys.in_box(&trial) {
                let ft = sys.rhs(p, &trial);
                let pt = merit(&ft, &scale);
                if pt.is_finite() && (pt <= (1.0 - 1e-4 * lambda) * phi || small) {
                    accepted = Some(trial);
                    break;
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some(mut next) => {
                clamp_box(m, &mut next, sys.hierarchical());
                y = next;
                if small {
                    let f = sys.rhs(p, &y);
                    history.push(merit(&f, &scale).sqrt());
                    return Ok(NewtonOutcome { y, converged: true, iterations: it + 1, history });
                }
            }
            // no descent left: accept if the residual is already at rounding level
            None => return Ok(NewtonOutcome { converged: phi.sqrt() <= STALL_MERIT, y, iterations: it + 1, history }),
        }
    }
    Ok(NewtonOutcome { y, converged: false, iterations: MAX_NEWTON, history })
}

fn relax<D: Dynamics>(
    sys: &D,
    p: f64,
    y: &DVector<f64>,
    t: f64,
    settings: &IntegratorSettings,
) -> Result<DVector<f64>, SolverError> {
    let loose = IntegratorSettings { rel_tol: settings.rel_tol.max(1e-8), ..*settings };
    Ok(integrate(sys, y, &PumpSchedule::constant(p), t, &loose, |_| Control::Continue)?.y)
}

/// Damped Newton from `guess`; when it stalls, relax by time integration for
/// increasingly long spans and try again.
pub fn find_steady(model: &Model, p: f64, guess: &DVector<f64>, settings: &IntegratorSettings) -> Result<SteadyState, SolverError> {
    find_steady_dyn(model, p, guess, settings)
}

pub(crate) fn find_steady_dyn<D: Dynamics>(
    sys: &D,
    p: f64,
    guess: &DVector<f64>,
    settings: &IntegratorSettings,
) -> Result<SteadyState, SolverError> {
    if guess.len() != sys.dim() {
        return Err(SolverError::Shape("guess does not match the system".into()));
    }
    let mut start = guess.clone();
    let mut used_integration = false;
    let mut last = None;
    for span in [0.0, 1e3, 1e4, 1e5, 1e6] {
        if span > 0.0 {
            used_integration = true;
            start = relax(sys, p, &start, span, settings)?;
        }
        let out = newton(sys, p, &start)?;
        if out.converged {
            let f = sys.rhs(p, &out.y);
            let residual_norm = relative_residual(&f, &out.y);
            return Ok(SteadyState {
                state: SystemState::from_flat(&out.y, sys.n_modes(), sys.hierarchical(), f64::INFINITY),
                y: out.y,
                p,
                residual_norm,
                converged: true,
                newton_iterations: out.iterations,
                residual_history: out.history,
                used_integration,
            });
        }
        start = out.y.clone();
        last = Some(out);
    }
    let y = last.map(|o| o.y).unwrap_or(start);
    let residual = relative_residual(&sys.rhs(p, &y), &y);
    Err(SolverError::NoSteadyState { p, residual, state: y.as_slice().to_vec() })
}

/// Steady states along `grid`, each seeded with the previous solution. The
/// first point starts from vacuum after a stretch of time integration.
pub fn continuation_sweep(
    model: &Model,
    grid: &[f64],
    settings: &IntegratorSettings,
) -> Vec<Result<SteadyState, SolverError>> {
    let mut out = Vec::with_capacity(grid.len());
    let mut guess: Option<DVector<f64>> = None;
    for &p in grid {
        let seed = match &guess {
            Some(g) => Ok(g.clone()),
            None => relax(model, p, &model.vacuum(), 1e3, settings),
        };
        let res = seed.and_then(|s| find_steady(model, p, &s, settings));
        if let Ok(ss) = &res {
            guess = Some(ss.y.clone());
        }
        out.push(res);
    }
    out
}
