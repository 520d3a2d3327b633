//! Right-hand sides and Jacobians of the photon/molecule rate equations.
//!
//! Photon mode i:   dn_i = [n_i (E_i + A_i) + E_i] u_i - gamma_i n_i,
//!                  u_i  = sum_j g_ij N_j f_j.
//! Molecular bin j: df_j = P (1 - f_j) - Gdown f_j
//!                         + sum_i g_ij [A_i n_i (1 - f_j) - E_i (n_i + 1) f_j].
//!
//! In operator language the molecular equation reads
//! df = sum_i n_i Ahat_i f - Ahat_0 f + x with Ahat_i = diag(-(E_i + A_i) g_i),
//! Ahat_0 = sum_i Ahat_i E_i / (E_i + A_i) + (Gdown + P) 1 and x_j = P + sum_i g_ij A_i n_i.
//! The source x enters with a plus sign and the E-weighted part of Ahat_0 as a
//! loss; with the opposite signs an empty cavity pumped from f = 0 would drive
//! f negative.

use nalgebra::{DMatrix, DVector};

use crate::error::SolverError;
use crate::model::Scene;

#[derive(Debug, Clone, PartialEq)]
pub enum Excitation {
    FullField(DVector<f64>),
    Hierarchical(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub n: DVector<f64>,
    pub excitation: Excitation,
    pub t: f64,
}

impl SystemState {
    pub fn vacuum_full(scene: &Scene) -> Self {
        Self {
            n: DVector::zeros(scene.n_modes()),
            excitation: Excitation::FullField(DVector::zeros(scene.n_bins())),
            t: 0.0,
        }
    }

    pub fn from_flat(y: &DVector<f64>, m: usize, hierarchical: bool, t: f64) -> Self {
        let n = y.rows(0, m).into_owned();
        let rest = y.rows(m, y.len() - m).into_owned();
        let excitation = if hierarchical { Excitation::Hierarchical(rest) } else { Excitation::FullField(rest) };
        Self { n, excitation, t }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let x = match &self.excitation {
            Excitation::FullField(f) | Excitation::Hierarchical(f) => f,
        };
        let mut y = DVector::zeros(self.n.len() + x.len());
        y.rows_mut(0, self.n.len()).copy_from(&self.n);
        y.rows_mut(self.n.len(), x.len()).copy_from(x);
        y
    }

    pub fn full_field(&self) -> Option<&DVector<f64>> {
        match &self.excitation {
            Excitation::FullField(f) => Some(f),
            Excitation::Hierarchical(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derivative {
    pub dn: DVector<f64>,
    pub dexcitation: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveModeView {
    pub u: DVector<f64>,
    pub u_crit: DVector<f64>,
    pub eta: DVector<f64>,
}

impl EffectiveModeView {
    /// Photon derivative in the effective single-mode form E_i u_i - eta_i n_i.
    pub fn dn(&self, scene: &Scene, n: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(n.len(), (0..n.len()).map(|i| scene.e[i] * self.u[i] - self.eta[i] * n[i]))
    }
}

pub fn effective_view_from_u(scene: &Scene, u: DVector<f64>) -> EffectiveModeView {
    let m = scene.n_modes();
    let u_crit = scene.u_crit();
    let eta = DVector::from_iterator(m, (0..m).map(|i| scene.gamma[i] - (scene.e[i] + scene.a[i]) * u[i]));
    EffectiveModeView { u, u_crit, eta }
}

/// Reservoir drive u = (g N) f.
pub fn drive(scene: &Scene, f: &DVector<f64>) -> DVector<f64> {
    &scene.gn * f
}

pub fn photon_rhs(scene: &Scene, n: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        n.len(),
        (0..n.len()).map(|i| {
            let (a, e) = (scene.a[i], scene.e[i]);
            (n[i] * (e + a) + e) * u[i] - scene.gamma[i] * n[i]
        }),
    )
}

/// Molecular rates a_j = sum_i g_ij A_i n_i and e_j = sum_i g_ij E_i (n_i + 1).
fn molecular_rates(scene: &Scene, n: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let an = scene.a.component_mul(n);
    let en = scene.e.component_mul(&n.add_scalar(1.0));
    (scene.g().tr_mul(&an), scene.g().tr_mul(&en))
}

pub fn rhs_full_parts(scene: &Scene, p: f64, n: &DVector<f64>, f: &DVector<f64>) -> Derivative {
    let u = drive(scene, f);
    let dn = photon_rhs(scene, n, &u);
    let (a, e) = molecular_rates(scene, n);
    let gd = scene.rates.gamma_down;
    let df = DVector::from_iterator(
        f.len(),
        (0..f.len()).map(|j| -gd * f[j] + (p + a[j]) * (1.0 - f[j]) - e[j] * f[j]),
    );
    Derivative { dn, dexcitation: df }
}

pub fn rhs_full(state: &SystemState, p: f64, scene: &Scene) -> Result<Derivative, SolverError> {
    let f = state
        .full_field()
        .ok_or_else(|| SolverError::Shape("rhs_full needs a full-field state".into()))?;
    if state.n.len() != scene.n_modes() || f.len() != scene.n_bins() {
        return Err(SolverError::Shape("state does not match the scene".into()));
    }
    const SLACK: f64 = 1e-9;
    if let Some(j) = f.iter().position(|&x| !(-SLACK..=1.0 + SLACK).contains(&x)) {
        return Err(SolverError::Validity { t: state.t, what: format!("f[{j}] = {}", f[j]) });
    }
    Ok(rhs_full_parts(scene, p, &state.n, f))
}

pub fn effective_view(state: &SystemState, scene: &Scene, hier: Option<&crate::hierarchy::HierarchyBasis>) -> EffectiveModeView {
    let u = match (&state.excitation, hier) {
        (Excitation::FullField(f), _) => drive(scene, f),
        (Excitation::Hierarchical(c), Some(h)) => h.drive(c),
        (Excitation::Hierarchical(_), None) => panic!("hierarchical state without a basis"),
    };
    effective_view_from_u(scene, u)
}

/// Jacobian of the full-field system. The n-n and f-f blocks are diagonal, the
/// cross blocks dense.
#[derive(Debug, Clone)]
pub struct ArrowJacobian {
    pub dnn: DVector<f64>,
    pub dnf: DMatrix<f64>,
    pub dfn: DMatrix<f64>,
    pub dff: DVector<f64>,
}

pub fn jacobian_full(scene: &Scene, p: f64, n: &DVector<f64>, f: &DVector<f64>) -> ArrowJacobian {
    let m = scene.n_modes();
    let b = scene.n_bins();
    let u = drive(scene, f);
    let dnn = DVector::from_iterator(m, (0..m).map(|i| (scene.e[i] + scene.a[i]) * u[i] - scene.gamma[i]));
    let mut dnf = scene.gn.clone();
    for i in 0..m {
        let s = n[i] * (scene.e[i] + scene.a[i]) + scene.e[i];
        dnf.row_mut(i).scale_mut(s);
    }
    let g = scene.g();
    let mut dfn = DMatrix::zeros(b, m);
    for i in 0..m {
        let (a, e) = (scene.a[i], scene.e[i]);
        for j in 0..b {
            dfn[(j, i)] = g[(i, j)] * (a * (1.0 - f[j]) - e * f[j]);
        }
    }
    let (ar, er) = molecular_rates(scene, n);
    let dff = DVector::from_iterator(b, (0..b).map(|j| -scene.rates.gamma_down - p - ar[j] - er[j]));
    ArrowJacobian { dnn, dnf, dfn, dff }
}

impl ArrowJacobian {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.dnn.len();
        let b = self.dff.len();
        let mut j = DMatrix::zeros(m + b, m + b);
        for i in 0..m {
            j[(i, i)] = self.dnn[i];
        }
        for k in 0..b {
            j[(m + k, m + k)] = self.dff[k];
        }
        j.view_mut((0, m), (m, b)).copy_from(&self.dnf);
        j.view_mut((m, 0), (b, m)).copy_from(&self.dfn);
        j
    }

    /// Factor (fac I - J) through the Schur complement on the photon block.
    pub fn factor(&self, fac: f64) -> Result<ArrowSolve, SolverError> {
        let dn = self.dnn.map(|x| fac - x);
        let df = self.dff.map(|x| fac - x);
        if df.iter().any(|&x| x == 0.0 || !x.is_finite()) {
            return Err(SolverError::Singular("molecular diagonal".into()));
        }
        let inv_df = df.map(|x| 1.0 / x);
        let mut scaled = self.dfn.clone();
        for (j, mut row) in scaled.row_iter_mut().enumerate() {
            row *= inv_df[j];
        }
        let mut s = -(&self.dnf * &scaled);
        for i in 0..dn.len() {
            s[(i, i)] += dn[i];
        }
        let lu = s.lu();
        if !lu.is_invertible() {
            return Err(SolverError::Singular("photon Schur complement".into()));
        }
        Ok(ArrowSolve { lu, dnf: self.dnf.clone(), dfn: self.dfn.clone(), inv_df })
    }
}

#[derive(Debug, Clone)]
pub struct ArrowSolve {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    dnf: DMatrix<f64>,
    dfn: DMatrix<f64>,
    inv_df: DVector<f64>,
}

impl ArrowSolve {
    /// Solves (fac I - J) x = r.
    ///   [ Dn   -Jnf ] [xn]   [rn]
    ///   [ -Jfn  Df  ] [xf] = [rf]
    pub fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        let m = self.dnf.nrows();
        let b = self.inv_df.len();
        let rn = r.rows(0, m);
        let rf_scaled = r.rows(m, b).component_mul(&self.inv_df);
        let rhs = rn + &self.dnf * &rf_scaled;
        let xn = self.lu.solve(&rhs).expect("factor checked invertibility");
        let xf = (r.rows(m, b) + &self.dfn * &xn).component_mul(&self.inv_df);
        let mut x = DVector::zeros(m + b);
        x.rows_mut(0, m).copy_from(&xn);
        x.rows_mut(m, b).copy_from(&xf);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SceneParams;
    use approx::assert_relative_eq;

    fn scene() -> Scene {
        Scene::build(&SceneParams::rhodamine(1.0)).unwrap()
    }

    fn interior_state(scene: &Scene) -> (DVector<f64>, DVector<f64>) {
        let m = scene.n_modes();
        let b = scene.n_bins();
        let n = DVector::from_fn(m, |i, _| 10f64.powf(2.0 + (i as f64 * 0.77) % 9.0));
        let f = DVector::from_fn(b, |j, _| 0.05 + 0.9 * ((j as f64 * 0.618) % 1.0));
        (n, f)
    }

    #[test]
    fn empty_cavity_unexcited_dye() {
        let s = scene();
        let st = SystemState::vacuum_full(&s);
        let d = rhs_full(&st, 0.3, &s).unwrap();
        assert!(d.dn.iter().all(|&x| x == 0.0));
        assert!(d.dexcitation.iter().all(|&x| x == 0.3));
    }

    #[test]
    fn pure_decay_without_pump() {
        let s = scene();
        let fstar = 0.4;
        let n = DVector::zeros(s.n_modes());
        let f = DVector::from_element(s.n_bins(), fstar);
        let d = rhs_full_parts(&s, 0.0, &n, &f);
        for j in 0..s.n_bins() {
            let spont: f64 = (0..s.n_modes()).map(|i| s.g()[(i, j)] * s.e[i]).sum();
            let expect = -(s.rates.gamma_down + spont) * fstar;
            assert_relative_eq!(d.dexcitation[j], expect, max_relative = 1e-14);
            assert!(d.dexcitation[j] < 0.0);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let s = scene();
        let (n, f) = interior_state(&s);
        let p = 0.07;
        let jac = jacobian_full(&s, p, &n, &f).to_dense();
        let m = s.n_modes();
        let dim = m + s.n_bins();
        let mut y = DVector::zeros(dim);
        y.rows_mut(0, m).copy_from(&n);
        y.rows_mut(m, s.n_bins()).copy_from(&f);
        let eval = |y: &DVector<f64>| {
            let d = rhs_full_parts(&s, p, &y.rows(0, m).into_owned(), &y.rows(m, dim - m).into_owned());
            let mut out = DVector::zeros(dim);
            out.rows_mut(0, m).copy_from(&d.dn);
            out.rows_mut(m, dim - m).copy_from(&d.dexcitation);
            out
        };
        // columns sampled: every photon column and a spread of molecular ones
        let cols: Vec<usize> = (0..m).chain((m..dim).step_by(37)).collect();
        for &k in &cols {
            let h = 1e-6 * y[k].abs().max(1e-3);
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[k] += h;
            ym[k] -= h;
            let fd = (eval(&yp) - eval(&ym)) / (2.0 * h);
            for r in 0..dim {
                let exact = jac[(r, k)];
                let scale = exact.abs().max(1e-300);
                let err = (fd[r] - exact).abs();
                // rounding noise of the difference quotient: the rhs is bilinear, so
                // |J_r| . |y| bounds the magnitude of the terms that cancel
                let terms: f64 = (0..dim).map(|c| (jac[(r, c)] * y[c]).abs()).sum();
                let noise = 64.0 * f64::EPSILON * terms / h;
                assert!(err <= 1e-6 * scale + noise, "({r},{k}): fd {} vs {}", fd[r], exact);
            }
        }
    }

    #[test]
    fn molecular_block_is_diagonal() {
        let s = scene();
        let (n, f) = interior_state(&s);
        let jac = jacobian_full(&s, 0.1, &n, &f).to_dense();
        let m = s.n_modes();
        for j in 0..40 {
            for k in 0..40 {
                if j != k {
                    assert_eq!(jac[(m + j, m + k)], 0.0);
                }
            }
        }
    }

    #[test]
    fn photon_diagonal_at_large_n_is_minus_eta() {
        let s = scene();
        let (mut n, f) = interior_state(&s);
        n[0] = 1e13;
        let jac = jacobian_full(&s, 0.1, &n, &f);
        let view = effective_view_from_u(&s, drive(&s, &f));
        assert_relative_eq!(jac.dnn[0], -view.eta[0], max_relative = 1e-12);
    }

    #[test]
    fn effective_form_agrees_with_gain_form() {
        let s = scene();
        let (n, f) = interior_state(&s);
        let u = drive(&s, &f);
        let view = effective_view_from_u(&s, u.clone());
        let direct = photon_rhs(&s, &n, &u);
        let eff = view.dn(&s, &n);
        for i in 0..s.n_modes() {
            let scale = (s.gamma[i] * n[i]).abs() + ((s.e[i] + s.a[i]) * n[i] * u[i]).abs() + s.e[i] * u[i];
            assert!((direct[i] - eff[i]).abs() <= 4.0 * f64::EPSILON * scale);
        }
    }

    #[test]
    fn criticality_cancels_n_dependence() {
        let s = scene();
        let uc = s.u_crit();
        let view = effective_view_from_u(&s, uc.clone());
        for i in 0..s.n_modes() {
            assert!(view.eta[i].abs() <= 1e-14 * s.gamma[i]);
            let d1 = photon_rhs(&s, &DVector::from_element(s.n_modes(), 1e3), &uc)[i];
            assert_relative_eq!(d1, s.e[i] * uc[i], max_relative = 1e-8);
        }
        let zero = photon_rhs(&s, &DVector::zeros(s.n_modes()), &DVector::from_element(s.n_modes(), 2e9));
        assert!(zero.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn arrow_solve_matches_dense_lu() {
        let s = scene();
        let (n, f) = interior_state(&s);
        let jac = jacobian_full(&s, 0.2, &n, &f);
        let dense = jac.to_dense();
        let dim = dense.nrows();
        for fac in [0.0, 0.37, 4e3] {
            let mut a = -dense.clone();
            for k in 0..dim {
                a[(k, k)] += fac;
            }
            let r = DVector::from_fn(dim, |k, _| ((k * 7919) % 101) as f64 / 50.0 - 1.0);
            let x = jac.factor(fac).unwrap().solve(&r);
            let resid = &a * &x - &r;
            assert!(resid.amax() < 1e-9 * (a.amax() * x.amax()).max(1.0), "fac {fac}: {}", resid.amax());
        }
    }

    #[test]
    fn rejects_wrong_representation() {
        let s = scene();
        let st = SystemState {
            n: DVector::zeros(s.n_modes()),
            excitation: Excitation::Hierarchical(DVector::zeros(3)),
            t: 0.0,
        };
        assert!(rhs_full(&st, 0.1, &s).is_err());
        let mut bad = SystemState::vacuum_full(&s);
        bad.excitation = Excitation::FullField(DVector::from_element(s.n_bins(), 1.5));
        assert!(matches!(rhs_full(&bad, 0.1, &s), Err(SolverError::Validity { .. })));
    }
}
