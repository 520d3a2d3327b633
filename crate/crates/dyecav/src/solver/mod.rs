//! Stiff integration and steady-state solves over either representation.

mod rodas;
mod steady;

pub use rodas::{integrate, Control, DenseStep, Trajectory};
pub use steady::{continuation_sweep, find_steady, SteadyState};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::SolverError;
use crate::hierarchy::HierarchyBasis;
use crate::kernel::{jacobian_full, rhs_full_parts, ArrowSolve, SystemState};
use crate::model::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSettings {
    #[serde(default = "d_rel")]
    pub rel_tol: f64,
    #[serde(default = "d_abs_n")]
    pub abs_tol_n: f64,
    #[serde(default = "d_abs_f")]
    pub abs_tol_f: f64,
    #[serde(default = "d_max_step")]
    pub max_step: f64,
    #[serde(default = "d_true")]
    pub dense_output: bool,
}

fn d_rel() -> f64 {
    1e-10
}
fn d_abs_n() -> f64 {
    1e-20
}
fn d_abs_f() -> f64 {
    1e-18
}
fn d_max_step() -> f64 {
    f64::INFINITY
}
fn d_true() -> bool {
    true
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self { rel_tol: d_rel(), abs_tol_n: d_abs_n(), abs_tol_f: d_abs_f(), max_step: d_max_step(), dense_output: true }
    }
}

impl IntegratorSettings {
    pub fn validate(&self) -> Result<(), crate::error::ConfigError> {
        use crate::error::ConfigError;
        for (k, v) in [("solver.rel_tol", self.rel_tol), ("solver.abs_tol_n", self.abs_tol_n), ("solver.abs_tol_f", self.abs_tol_f), ("solver.max_step", self.max_step)] {
            if !(v > 0.0) {
                return Err(ConfigError::invalid(k, "must be positive"));
            }
        }
        Ok(())
    }
}

/// A factored (fac I - J).
pub enum Factored {
    Arrow(ArrowSolve),
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factored {
    pub fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Factored::Arrow(a) => a.solve(r),
            Factored::Dense(lu) => lu.solve(r).expect("factor checked invertibility"),
        }
    }
}

/// Flat-vector view of the rate equations: y = [n; excitation].
pub trait Dynamics: Sync {
    fn n_modes(&self) -> usize;
    fn dim(&self) -> usize;
    fn rhs(&self, p: f64, y: &DVector<f64>) -> DVector<f64>;
    fn factor(&self, p: f64, y: &DVector<f64>, fac: f64) -> Result<Factored, SolverError>;
    /// Whether y is inside the physical box up to the given slack.
    fn in_box(&self, y: &DVector<f64>) -> bool;
    fn hierarchical(&self) -> bool;
}

pub struct FullField<'a> {
    pub scene: &'a Scene,
}

impl Dynamics for FullField<'_> {
    fn n_modes(&self) -> usize {
        self.scene.n_modes()
    }

    fn dim(&self) -> usize {
        self.scene.n_modes() + self.scene.n_bins()
    }

    fn rhs(&self, p: f64, y: &DVector<f64>) -> DVector<f64> {
        let m = self.n_modes();
        let b = self.scene.n_bins();
        let d = rhs_full_parts(self.scene, p, &y.rows(0, m).into_owned(), &y.rows(m, b).into_owned());
        join(&d.dn, &d.dexcitation)
    }

    fn factor(&self, p: f64, y: &DVector<f64>, fac: f64) -> Result<Factored, SolverError> {
        let m = self.n_modes();
        let b = self.scene.n_bins();
        let j = jacobian_full(self.scene, p, &y.rows(0, m).into_owned(), &y.rows(m, b).into_owned());
        Ok(Factored::Arrow(j.factor(fac)?))
    }

    fn in_box(&self, y: &DVector<f64>) -> bool {
        let m = self.n_modes();
        y.rows(0, m).iter().all(|&n| n >= -N_SLACK) && y.rows(m, y.len() - m).iter().all(|&f| (-F_SLACK..=1.0 + F_SLACK).contains(&f))
    }

    fn hierarchical(&self) -> bool {
        false
    }
}

/// Slack on the physical box: photon numbers are counts, so anything above
/// -1e-6 is rounding; molecular fractions are O(1).
pub const N_SLACK: f64 = 1e-6;
pub const F_SLACK: f64 = 1e-9;

pub struct Hierarchical<'a> {
    pub scene: &'a Scene,
    pub basis: &'a HierarchyBasis,
}

impl Dynamics for Hierarchical<'_> {
    fn n_modes(&self) -> usize {
        self.scene.n_modes()
    }

    fn dim(&self) -> usize {
        self.scene.n_modes() + self.basis.dim()
    }

    fn rhs(&self, p: f64, y: &DVector<f64>) -> DVector<f64> {
        let m = self.n_modes();
        let (dn, dc) = self.basis.rhs(self.scene, p, &y.rows(0, m).into_owned(), &y.rows(m, self.basis.dim()).into_owned());
        join(&dn, &dc)
    }

    fn factor(&self, p: f64, y: &DVector<f64>, fac: f64) -> Result<Factored, SolverError> {
        let m = self.n_modes();
        let mut a = -self.basis.jacobian(self.scene, p, &y.rows(0, m).into_owned(), &y.rows(m, self.basis.dim()).into_owned());
        for k in 0..a.nrows() {
            a[(k, k)] += fac;
        }
        let lu = a.lu();
        if !lu.is_invertible() {
            return Err(SolverError::Singular("hierarchical Jacobian".into()));
        }
        Ok(Factored::Dense(lu))
    }

    fn in_box(&self, y: &DVector<f64>) -> bool {
        y.rows(0, self.n_modes()).iter().all(|&n| n >= -N_SLACK)
    }

    fn hierarchical(&self) -> bool {
        true
    }
}

/// Owned choice of representation, convenient for experiments.
pub enum Model<'a> {
    Full(FullField<'a>),
    Hier(Hierarchical<'a>),
}

impl<'a> Model<'a> {
    pub fn new(scene: &'a Scene, basis: Option<&'a HierarchyBasis>) -> Self {
        match basis {
            Some(b) => Model::Hier(Hierarchical { scene, basis: b }),
            None => Model::Full(FullField { scene }),
        }
    }

    pub fn scene(&self) -> &Scene {
        match self {
            Model::Full(f) => f.scene,
            Model::Hier(h) => h.scene,
        }
    }

    pub fn basis(&self) -> Option<&HierarchyBasis> {
        match self {
            Model::Full(_) => None,
            Model::Hier(h) => Some(h.basis),
        }
    }

    /// Flat state from a full-field state, projecting when hierarchical.
    pub fn flatten(&self, s: &SystemState) -> Result<DVector<f64>, SolverError> {
        match (self, &s.excitation) {
            (Model::Hier(h), crate::kernel::Excitation::FullField(_)) => Ok(h.basis.project_state(s)?.to_flat()),
            _ => {
                let y = s.to_flat();
                if y.len() != self.dim() {
                    return Err(SolverError::Shape("state does not match the model".into()));
                }
                Ok(y)
            }
        }
    }

    pub fn unflatten(&self, y: &DVector<f64>, t: f64) -> SystemState {
        SystemState::from_flat(y, self.n_modes(), self.hierarchical(), t)
    }

    pub fn vacuum(&self) -> DVector<f64> {
        DVector::zeros(self.dim())
    }
}

impl Dynamics for Model<'_> {
    fn n_modes(&self) -> usize {
        match self {
            Model::Full(f) => f.n_modes(),
            Model::Hier(h) => h.n_modes(),
        }
    }
    fn dim(&self) -> usize {
        match self {
            Model::Full(f) => f.dim(),
            Model::Hier(h) => h.dim(),
        }
    }
    fn rhs(&self, p: f64, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Model::Full(f) => f.rhs(p, y),
            Model::Hier(h) => h.rhs(p, y),
        }
    }
    fn factor(&self, p: f64, y: &DVector<f64>, fac: f64) -> Result<Factored, SolverError> {
        match self {
            Model::Full(f) => f.factor(p, y, fac),
            Model::Hier(h) => h.factor(p, y, fac),
        }
    }
    fn in_box(&self, y: &DVector<f64>) -> bool {
        match self {
            Model::Full(f) => f.in_box(y),
            Model::Hier(h) => h.in_box(y),
        }
    }
    fn hierarchical(&self) -> bool {
        matches!(self, Model::Hier(_))
    }
}

pub(crate) fn join(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(a.len() + b.len());
    y.rows_mut(0, a.len()).copy_from(a);
    y.rows_mut(a.len(), b.len()).copy_from(b);
    y
}

/// Per-component absolute tolerances: photon block then excitation block.
pub(crate) fn abs_tol(m: usize, dim: usize, s: &IntegratorSettings) -> DVector<f64> {
    DVector::from_fn(dim, |k, _| if k < m { s.abs_tol_n } else { s.abs_tol_f })
}

/// Largest block-RMS of err / (atol + rtol * max(|y0|, |y1|)). Taking the
/// worse of the two blocks keeps the few photon components from being
/// averaged away by the many molecular ones.
pub(crate) fn error_norm(
    m: usize,
    err: &DVector<f64>,
    y0: &DVector<f64>,
    y1: &DVector<f64>,
    atol: &DVector<f64>,
    rtol: f64,
) -> f64 {
    let mut acc = [0.0f64; 2];
    for k in 0..err.len() {
        let sc = atol[k] + rtol * y0[k].abs().max(y1[k].abs());
        let r = err[k] / sc;
        acc[usize::from(k >= m)] += r * r;
    }
    let rn = (acc[0] / m.max(1) as f64).sqrt();
    let rf = if err.len() > m { (acc[1] / (err.len() - m) as f64).sqrt() } else { 0.0 };
    rn.max(rf)
}
