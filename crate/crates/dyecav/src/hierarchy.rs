//! Block-Krylov hierarchy of molecular excitation components.
//!
//! Level 0 spans the weight vectors w_i = g_i N. Level k+1 is what the diagonal
//! profiles diag(g_i) generate from level k, orthogonalized against everything
//! below. Because each diag(g_i) maps level k into levels k-1..k+1 only, the
//! projected operators are block tridiagonal.

use nalgebra::{DMatrix, DVector};

use crate::error::{ConfigError, SolverError};
use crate::kernel::{photon_rhs, Excitation, SystemState};
use crate::model::Scene;

pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct HierarchyBasis {
    pub depth: usize,
    /// Orthonormal columns for each level, bins x k_l.
    pub levels: Vec<DMatrix<f64>>,
    /// All levels side by side, bins x K.
    pub v: DMatrix<f64>,
    pub offsets: Vec<usize>,
    /// (g N) V, modes x K; u = wc c.
    pub wc: DMatrix<f64>,
    /// V^T 1
    pub src_pump: DVector<f64>,
    /// V^T g^T, K x modes
    pub gc: DMatrix<f64>,
    /// V^T diag(g_i) V per mode, with blocks |j - k| > 1 set to zero.
    pub ops: Vec<DMatrix<f64>>,
    /// Largest dropped entry of the far blocks relative to the largest entry of the operator.
    pub far_block_rel: f64,
}

/// Orthonormalize candidates against `previous` and each other. A residue is
/// dropped when its norm is below RANK_TOL times the largest candidate norm of
/// the level, which also discards pure rounding noise once the space saturates.
fn orthonormal_level(candidates: Vec<DVector<f64>>, previous: &[DMatrix<f64>]) -> Vec<DVector<f64>> {
    let biggest = candidates.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if biggest == 0.0 {
        return Vec::new();
    }
    let rows = candidates[0].len();
    let prev_cols: usize = previous.iter().map(|b| b.ncols()).sum();
    // previous levels and accepted vectors share one growing matrix
    let mut q = DMatrix::zeros(rows, prev_cols + candidates.len().min(rows));
    let mut filled = 0;
    for b in previous {
        q.view_mut((0, filled), (rows, b.ncols())).copy_from(b);
        filled += b.ncols();
    }
    let mut kept = Vec::new();
    for mut v in candidates {
        if filled == q.ncols() {
            break;
        }
        for _ in 0..2 {
            let basis = q.columns(0, filled);
            let c = basis.tr_mul(&v);
            v.gemv(-1.0, &basis, &c, 1.0);
        }
        let nrm = v.norm();
        if nrm > RANK_TOL * biggest {
            v /= nrm;
            q.set_column(filled, &v);
            filled += 1;
            kept.push(v);
        }
    }
    kept
}

fn columns(vs: &[DVector<f64>], rows: usize) -> DMatrix<f64> {
    if vs.is_empty() {
        DMatrix::zeros(rows, 0)
    } else {
        DMatrix::from_columns(vs)
    }
}

pub fn build_hierarchy(scene: &Scene, depth: usize) -> Result<HierarchyBasis, ConfigError> {
    let m = scene.n_modes();
    let b = scene.n_bins();
    let g = scene.g();
    let seeds: Vec<DVector<f64>> = (0..m).map(|i| scene.gn.row(i).transpose()).collect();
    let level0 = orthonormal_level(seeds, &[]);
    if level0.len() < m {
        return Err(ConfigError::invalid(
            "scene",
            format!("coupling weights have rank {} < {} modes; grid too coarse", level0.len(), m),
        ));
    }
    let mut levels = vec![columns(&level0, b)];
    for _ in 0..depth {
        let last = levels.last().unwrap();
        if last.ncols() == 0 {
            levels.push(DMatrix::zeros(b, 0));
            continue;
        }
        let mut cands = Vec::with_capacity(m * last.ncols());
        for i in 0..m {
            let gi = g.row(i).transpose();
            for col in last.column_iter() {
                cands.push(col.component_mul(&gi));
            }
        }
        let next = orthonormal_level(cands, &levels);
        levels.push(columns(&next, b));
    }
    let mut offsets = vec![0];
    for l in &levels {
        offsets.push(offsets.last().unwrap() + l.ncols());
    }
    let k = *offsets.last().unwrap();
    let mut v = DMatrix::zeros(b, k);
    for (l, blk) in levels.iter().enumerate() {
        v.view_mut((0, offsets[l]), (b, blk.ncols())).copy_from(blk);
    }
    let wc = &scene.gn * &v;
    let src_pump = v.tr_mul(&DVector::from_element(b, 1.0));
    let gc = v.tr_mul(&g.transpose());
    let mut ops = Vec::with_capacity(m);
    let mut far_block_rel: f64 = 0.0;
    for i in 0..m {
        let mut dv = v.clone();
        for (j, mut row) in dv.row_iter_mut().enumerate() {
            row *= g[(i, j)];
        }
        let mut op = v.tr_mul(&dv);
        let scale = op.amax().max(f64::MIN_POSITIVE);
        for lj in 0..levels.len() {
            for lk in 0..levels.len() {
                if lj.abs_diff(lk) > 1 {
                    let (r0, nr) = (offsets[lj], levels[lj].ncols());
                    let (c0, nc) = (offsets[lk], levels[lk].ncols());
                    let mut blk = op.view_mut((r0, c0), (nr, nc));
                    far_block_rel = far_block_rel.max(blk.amax() / scale);
                    blk.fill(0.0);
                }
            }
        }
        ops.push(op);
    }
    Ok(HierarchyBasis { depth, levels, v, offsets, wc, src_pump, gc, ops, far_block_rel })
}

impl HierarchyBasis {
    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn level_ranks(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.ncols()).collect()
    }

    pub fn project(&self, f: &DVector<f64>) -> DVector<f64> {
        self.v.tr_mul(f)
    }

    pub fn lift(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.v * c
    }

    pub fn project_state(&self, s: &SystemState) -> Result<SystemState, SolverError> {
        let f = s.full_field().ok_or_else(|| SolverError::Shape("expected a full-field state".into()))?;
        Ok(SystemState { n: s.n.clone(), excitation: Excitation::Hierarchical(self.project(f)), t: s.t })
    }

    pub fn lift_state(&self, s: &SystemState) -> Result<SystemState, SolverError> {
        match &s.excitation {
            Excitation::Hierarchical(c) if c.len() == self.dim() => Ok(SystemState {
                n: s.n.clone(),
                excitation: Excitation::FullField(self.lift(c)),
                t: s.t,
            }),
            _ => Err(SolverError::Shape("expected a hierarchical state of matching depth".into())),
        }
    }

    /// Relative norm of the part of f outside the span.
    pub fn span_residual(&self, f: &DVector<f64>) -> f64 {
        let r = f - self.lift(&self.project(f));
        r.norm() / f.norm().max(f64::MIN_POSITIVE)
    }

    pub fn drive(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.wc * c
    }

    pub fn rhs(&self, scene: &Scene, p: f64, n: &DVector<f64>, c: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let u = self.drive(c);
        let dn = photon_rhs(scene, n, &u);
        let an = scene.a.component_mul(n);
        let mut dc = &self.gc * an;
        dc.axpy(p, &self.src_pump, 1.0);
        dc.axpy(-(scene.rates.gamma_down + p), c, 1.0);
        for (i, op) in self.ops.iter().enumerate() {
            let beta = (scene.a[i] + scene.e[i]) * n[i] + scene.e[i];
            dc.gemv(-beta, op, c, 1.0);
        }
        (dn, dc)
    }

    pub fn jacobian(&self, scene: &Scene, p: f64, n: &DVector<f64>, c: &DVector<f64>) -> DMatrix<f64> {
        let m = scene.n_modes();
        let k = self.dim();
        let u = self.drive(c);
        let mut jac = DMatrix::zeros(m + k, m + k);
        for i in 0..m {
            let (a, e) = (scene.a[i], scene.e[i]);
            jac[(i, i)] = (e + a) * u[i] - scene.gamma[i];
            let s = n[i] * (e + a) + e;
            let mut row = jac.view_mut((i, m), (1, k));
            row.copy_from(&(self.wc.row(i) * s));
            let mut col = self.gc.column(i) * a;
            col.gemv(-(a + e), &self.ops[i], c, 1.0);
            jac.view_mut((m, i), (k, 1)).copy_from(&col);
        }
        let mut cc = jac.view_mut((m, m), (k, k));
        for (i, op) in self.ops.iter().enumerate() {
            let beta = (scene.a[i] + scene.e[i]) * n[i] + scene.e[i];
            cc -= op * beta;
        }
        for d in 0..k {
            cc[(d, d)] -= scene.rates.gamma_down + p;
        }
        jac
    }
}

pub fn rhs_hier(
    state: &SystemState,
    p: f64,
    scene: &Scene,
    basis: &HierarchyBasis,
) -> Result<crate::kernel::Derivative, SolverError> {
    match &state.excitation {
        Excitation::Hierarchical(c) if c.len() == basis.dim() && state.n.len() == scene.n_modes() => {
            let (dn, dc) = basis.rhs(scene, p, &state.n, c);
            Ok(crate::kernel::Derivative { dn, dexcitation: dc })
        }
        _ => Err(SolverError::Shape("state does not match the hierarchy depth".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{drive, rhs_full_parts};
    use crate::model::SceneParams;
    use approx::assert_relative_eq;

    fn scene() -> Scene {
        Scene::build(&SceneParams::rhodamine(1.0)).unwrap()
    }

    fn field(b: usize) -> DVector<f64> {
        DVector::from_fn(b, |j, _| 0.1 + 0.8 * ((j as f64 * 0.381_966) % 1.0))
    }

    #[test]
    fn level_zero_has_one_direction_per_mode() {
        let s = scene();
        let h = build_hierarchy(&s, 0).unwrap();
        assert_eq!(h.level_ranks(), vec![15]);
    }

    #[test]
    fn basis_is_orthonormal() {
        let s = scene();
        let h = build_hierarchy(&s, 2).unwrap();
        let gram = h.v.tr_mul(&h.v);
        let err = (gram - DMatrix::identity(h.dim(), h.dim())).amax();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn far_blocks_vanish() {
        let s = scene();
        let h = build_hierarchy(&s, 3).unwrap();
        assert!(h.far_block_rel < 1e-10, "{}", h.far_block_rel);
    }

    #[test]
    fn profile_of_level_zero_lives_in_two_levels() {
        let s = scene();
        let h = build_hierarchy(&s, 1).unwrap();
        let v0 = h.levels[0].column(3).into_owned();
        for i in [0, 4, 11] {
            let x = v0.component_mul(&s.g().row(i).transpose());
            let back = h.lift(&h.project(&x));
            assert!((back - &x).norm() <= 1e-10 * x.norm());
        }
    }

    #[test]
    fn project_lift_roundtrip_and_zero() {
        let s = scene();
        let h = build_hierarchy(&s, 2).unwrap();
        let c = DVector::from_fn(h.dim(), |k, _| ((k * 31) % 17) as f64 / 17.0 - 0.5);
        let back = h.project(&h.lift(&c));
        assert!((back - &c).amax() < 1e-12);
        assert!(h.project(&DVector::zeros(s.n_bins())).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_field_recovered_within_span_residual() {
        let s = scene();
        let h = build_hierarchy(&s, 2).unwrap();
        let one = DVector::from_element(s.n_bins(), 0.3);
        let res = h.span_residual(&one);
        let back = h.lift(&h.project(&one));
        assert_relative_eq!((back - &one).norm() / one.norm(), res, max_relative = 1e-9);
    }

    #[test]
    fn photon_rates_only_see_level_zero() {
        let s = scene();
        let h = build_hierarchy(&s, 2).unwrap();
        let f = field(s.n_bins());
        let u_full = drive(&s, &f);
        let mut c = h.project(&f);
        for k in h.offsets[1]..h.dim() {
            c[k] = 0.0;
        }
        let u_h = h.drive(&c);
        for i in 0..s.n_modes() {
            assert_relative_eq!(u_full[i], u_h[i], max_relative = 1e-11);
        }
    }

    #[test]
    fn full_rank_hierarchy_reproduces_projected_rhs() {
        let s = scene();
        // depth large enough to exhaust the invariant subspace
        let h = build_hierarchy(&s, 6).unwrap();
        let f = h.lift(&h.project(&field(s.n_bins())));
        let n = DVector::from_fn(s.n_modes(), |i, _| 10f64.powi(i as i32 % 7));
        let p = 0.05;
        let full = rhs_full_parts(&s, p, &n, &f);
        let (dn, dc) = h.rhs(&s, p, &n, &h.project(&f));
        let proj = h.project(&full.dexcitation);
        assert!((&dc - &proj).amax() <= 1e-10 * proj.amax());
        for i in 0..s.n_modes() {
            assert_relative_eq!(dn[i], full.dn[i], max_relative = 1e-10);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let s = scene();
        let h = build_hierarchy(&s, 1).unwrap();
        let m = s.n_modes();
        let k = h.dim();
        let n = DVector::from_fn(m, |i, _| 10f64.powf(1.0 + i as f64 * 0.6));
        let c = h.project(&field(s.n_bins()));
        let p = 0.2;
        let jac = h.jacobian(&s, p, &n, &c);
        let eval = |n: &DVector<f64>, c: &DVector<f64>| {
            let (a, b) = h.rhs(&s, p, n, c);
            let mut y = DVector::zeros(m + k);
            y.rows_mut(0, m).copy_from(&a);
            y.rows_mut(m, k).copy_from(&b);
            y
        };
        for col in (0..m + k).step_by(5) {
            let (mut np, mut cp, mut nm, mut cm) = (n.clone(), c.clone(), n.clone(), c.clone());
            let hstep = if col < m {
                let hh = 1e-6 * n[col];
                np[col] += hh;
                nm[col] -= hh;
                hh
            } else {
                let hh = 1e-6 * c[col - m].abs().max(1e-3);
                cp[col - m] += hh;
                cm[col - m] -= hh;
                hh
            };
            let fd = (eval(&np, &cp) - eval(&nm, &cm)) / (2.0 * hstep);
            let scale = jac.column(col).amax();
            for r in 0..m + k {
                assert!(
                    (fd[r] - jac[(r, col)]).abs() <= 1e-6 * jac[(r, col)].abs() + 1e-9 * scale.max(jac.row(r).amax()),
                    "({r},{col}) {} vs {}",
                    fd[r],
                    jac[(r, col)]
                );
            }
        }
    }

    #[test]
    fn coarse_grid_collapses_rank() {
        let mut p = SceneParams::rhodamine(1.0);
        p.extent = 0.4;
        let s = Scene::build(&p).unwrap();
        assert!(build_hierarchy(&s, 0).is_err());
    }
}
