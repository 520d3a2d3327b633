//! Physical scene: cavity modes, the dye grid, mode/molecule couplings and rates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeIndex {
    pub mx: usize,
    pub my: usize,
}

impl ModeIndex {
    pub fn new(mx: usize, my: usize) -> Self {
        Self { mx, my }
    }

    pub fn level(&self) -> usize {
        self.mx + self.my
    }

    pub fn swapped(&self) -> Self {
        Self { mx: self.my, my: self.mx }
    }
}

impl std::fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{}]", self.mx, self.my)
    }
}

#[derive(Debug, Clone)]
pub struct ModeSet {
    pub modes: Vec<ModeIndex>,
    pub a: Vec<f64>,
    pub e: Vec<f64>,
    pub kappa: f64,
}

impl ModeSet {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn position(&self, m: ModeIndex) -> Option<usize> {
        self.modes.iter().position(|&x| x == m)
    }

    pub fn max_level(&self) -> usize {
        self.modes.iter().map(|m| m.level()).max().map_or(0, |l| l + 1)
    }
}

/// All (mx, my) with mx + my < max_level, ordered by level then mx.
pub fn build_mode_set(
    max_level: usize,
    a_per_level: &[f64],
    e_per_level: &[f64],
    kappa: f64,
) -> Result<ModeSet, ConfigError> {
    if max_level < 1 {
        return Err(ConfigError::invalid("scene.max_level", "must be at least 1"));
    }
    for (key, list) in [("scene.A_per_level", a_per_level), ("scene.E_per_level", e_per_level)] {
        if list.len() != max_level {
            return Err(ConfigError::invalid(
                key,
                format!("has {} entries but max_level is {}", list.len(), max_level),
            ));
        }
        if list.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(ConfigError::invalid(key, "rates must be positive and finite"));
        }
    }
    if !(kappa > 0.0) {
        return Err(ConfigError::invalid("scene.kappa", "must be positive"));
    }
    let mut modes = Vec::new();
    let mut a = Vec::new();
    let mut e = Vec::new();
    for level in 0..max_level {
        for mx in 0..=level {
            modes.push(ModeIndex::new(mx, level - mx));
            a.push(a_per_level[level]);
            e.push(e_per_level[level]);
        }
    }
    Ok(ModeSet { modes, a, e, kappa })
}

/// Normalized 1D oscillator eigenfunctions psi_0..psi_{mmax} at x (l_ho = 1).
pub fn hermite_functions(mmax: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(mmax + 1);
    out.push(std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp());
    if mmax >= 1 {
        out.push(std::f64::consts::SQRT_2 * x * out[0]);
    }
    for m in 1..mmax {
        let mf = m as f64;
        let next = (2.0 / (mf + 1.0)).sqrt() * x * out[m] - (mf / (mf + 1.0)).sqrt() * out[m - 1];
        out.push(next);
    }
    out
}

pub fn mode_intensity(mode: ModeIndex, x: f64, y: f64) -> f64 {
    let px = hermite_functions(mode.mx, x)[mode.mx];
    let py = hermite_functions(mode.my, y)[mode.my];
    px * px * py * py
}

#[derive(Debug, Clone)]
pub struct MoleculeGrid {
    /// Bin centres, x-major: bin (ix, iy) sits at index ix * side + iy.
    pub positions: Vec<[f64; 2]>,
    pub n: Vec<f64>,
    pub cell_area: f64,
    pub spacing: f64,
    pub extent: f64,
    pub side: usize,
}

impl MoleculeGrid {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Index of the bin mirrored through the diagonal x = y.
    pub fn mirror(&self, j: usize) -> usize {
        let (ix, iy) = (j / self.side, j % self.side);
        iy * self.side + ix
    }
}

/// Square grid with spacing sqrt(N_per_bin / density). Centres sit at k*h for
/// |k| <= round(extent / h), so the node lines x = 0 and y = 0 are sampled.
pub fn build_grid(density: f64, n_per_bin: f64, extent: f64) -> Result<MoleculeGrid, ConfigError> {
    for (key, v) in [("scene.density", density), ("scene.N_per_bin", n_per_bin), ("scene.extent", extent)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ConfigError::invalid(key, "must be positive and finite"));
        }
    }
    let h = (n_per_bin / density).sqrt();
    let k = (extent / h).round().max(1.0) as i64;
    let side = (2 * k + 1) as usize;
    let mut positions = Vec::with_capacity(side * side);
    for ix in -k..=k {
        for iy in -k..=k {
            positions.push([ix as f64 * h, iy as f64 * h]);
        }
    }
    let len = positions.len();
    Ok(MoleculeGrid {
        positions,
        n: vec![n_per_bin; len],
        cell_area: h * h,
        spacing: h,
        extent,
        side,
    })
}

#[derive(Debug, Clone)]
pub struct CouplingMatrix {
    /// modes x bins
    pub g: DMatrix<f64>,
}

/// g_ij = intensity_i(r_j) * cell_area * scale.
pub fn build_coupling(modes: &ModeSet, grid: &MoleculeGrid, scale: f64) -> CouplingMatrix {
    let lmax = modes.modes.iter().map(|m| m.mx.max(m.my)).max().unwrap_or(0);
    // per-axis tables; the grid is a tensor product so x and y share the same coordinates
    let coords: Vec<f64> = (0..grid.side).map(|i| grid.positions[i * grid.side][0]).collect();
    let psi: Vec<Vec<f64>> = coords.iter().map(|&x| hermite_functions(lmax, x)).collect();
    let w = grid.cell_area * scale;
    let mut g = DMatrix::zeros(modes.len(), grid.len());
    for (i, m) in modes.modes.iter().enumerate() {
        for ix in 0..grid.side {
            let px = psi[ix][m.mx] * psi[ix][m.mx];
            for iy in 0..grid.side {
                let py = psi[iy][m.my] * psi[iy][m.my];
                g[(i, ix * grid.side + iy)] = px * py * w;
            }
        }
    }
    CouplingMatrix { g }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateConstants {
    pub gamma_down: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub pump: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PumpSchedule {
    pub segments: Vec<Segment>,
}

impl PumpSchedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self, ConfigError> {
        if segments.is_empty() {
            return Err(ConfigError::invalid("schedule", "needs at least one segment"));
        }
        if segments[0].start != 0.0 {
            return Err(ConfigError::invalid("schedule", "first segment must start at t = 0"));
        }
        for w in segments.windows(2) {
            if !(w[1].start > w[0].start) {
                return Err(ConfigError::invalid("schedule", "segment start times must increase"));
            }
        }
        if segments.iter().any(|s| !(s.pump >= 0.0) || !s.pump.is_finite()) {
            return Err(ConfigError::invalid("schedule", "pump rates must be non-negative"));
        }
        Ok(Self { segments })
    }

    pub fn constant(p: f64) -> Self {
        Self { segments: vec![Segment { start: 0.0, pump: p }] }
    }

    pub fn last_switch(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.start)
    }

    pub fn final_pump(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.pump)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub max_level: usize,
    #[serde(rename = "A_per_level")]
    pub a_per_level: Vec<f64>,
    #[serde(rename = "E_per_level")]
    pub e_per_level: Vec<f64>,
    pub density: f64,
    #[serde(rename = "N_per_bin")]
    pub n_per_bin: f64,
    #[serde(default = "default_extent")]
    pub extent: f64,
    #[serde(rename = "Gamma_down")]
    pub gamma_down: f64,
    #[serde(default = "default_one")]
    pub kappa: f64,
    #[serde(default = "default_one")]
    pub coupling_scale: f64,
}

fn default_extent() -> f64 {
    5.0
}

fn default_one() -> f64 {
    1.0
}

pub const RHODAMINE_A: [f64; 5] = [3.8e-12, 9.2e-12, 23.0e-12, 55.4e-12, 124.9e-12];
pub const RHODAMINE_E: [f64; 5] = [5.6e-10, 6.8e-10, 8.2e-10, 9.3e-10, 10.0e-10];

impl SceneParams {
    /// Scene with the rhodamine-6G rates, density 1e13 and 1e12 molecules per bin.
    pub fn rhodamine(coupling_scale: f64) -> Self {
        Self {
            max_level: 5,
            a_per_level: RHODAMINE_A.to_vec(),
            e_per_level: RHODAMINE_E.to_vec(),
            density: 1e13,
            n_per_bin: 1e12,
            extent: 5.0,
            gamma_down: 0.25,
            kappa: 1.0,
            coupling_scale,
        }
    }
}

/// Immutable bundle of everything the kernels need.
#[derive(Debug, Clone)]
pub struct Scene {
    pub params: SceneParams,
    pub modes: ModeSet,
    pub grid: MoleculeGrid,
    pub coupling: CouplingMatrix,
    pub rates: RateConstants,
    /// g_ij N_j
    pub gn: DMatrix<f64>,
    /// sum_j g_ij N_j
    pub weight: DVector<f64>,
    /// A_i sum_j g_ij N_j + kappa
    pub gamma: DVector<f64>,
    pub a: DVector<f64>,
    pub e: DVector<f64>,
}

impl Scene {
    pub fn build(params: &SceneParams) -> Result<Self, ConfigError> {
        if !(params.gamma_down >= 0.0) {
            return Err(ConfigError::invalid("scene.Gamma_down", "must be non-negative"));
        }
        if !(params.coupling_scale > 0.0) || !params.coupling_scale.is_finite() {
            return Err(ConfigError::invalid("scene.coupling_scale", "must be positive"));
        }
        let modes = build_mode_set(params.max_level, &params.a_per_level, &params.e_per_level, params.kappa)?;
        let grid = build_grid(params.density, params.n_per_bin, params.extent)?;
        let coupling = build_coupling(&modes, &grid, params.coupling_scale);
        let rates = RateConstants { gamma_down: params.gamma_down, kappa: params.kappa };
        Ok(Self::assemble(params.clone(), modes, grid, coupling, rates))
    }

    pub fn assemble(
        params: SceneParams,
        modes: ModeSet,
        grid: MoleculeGrid,
        coupling: CouplingMatrix,
        rates: RateConstants,
    ) -> Self {
        let nvec = DVector::from_column_slice(&grid.n);
        let mut gn = coupling.g.clone();
        for (j, mut col) in gn.column_iter_mut().enumerate() {
            col *= nvec[j];
        }
        let weight = DVector::from_iterator(gn.nrows(), gn.row_iter().map(|r| r.sum()));
        let a = DVector::from_column_slice(&modes.a);
        let e = DVector::from_column_slice(&modes.e);
        let gamma = a.component_mul(&weight).add_scalar(rates.kappa);
        Self { params, modes, grid, coupling, rates, gn, weight, gamma, a, e }
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn n_bins(&self) -> usize {
        self.grid.len()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.coupling.g
    }

    /// Critical drive gamma_i / (E_i + A_i).
    pub fn u_crit(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_modes(),
            (0..self.n_modes()).map(|i| self.gamma[i] / (self.e[i] + self.a[i])),
        )
    }

    /// Copy of the scene with different loss/pump-independent rates; used for
    /// the closed-system conservation check.
    pub fn with_rates(&self, gamma_down: f64, kappa: f64) -> Self {
        let mut params = self.params.clone();
        params.gamma_down = gamma_down;
        params.kappa = kappa;
        let mut modes = self.modes.clone();
        modes.kappa = kappa;
        Self::assemble(
            params,
            modes,
            self.grid.clone(),
            self.coupling.clone(),
            RateConstants { gamma_down, kappa },
        )
    }
}
