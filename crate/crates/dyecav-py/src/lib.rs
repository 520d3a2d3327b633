//! Python bindings. Vectors cross the boundary as plain lists of floats.

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dyecav::analysis::{self, DetectSettings};
use dyecav::config::RunConfig;
use dyecav::experiments::{self, QuenchSettings};
use dyecav::hierarchy::{build_hierarchy, HierarchyBasis};
use dyecav::kernel;
use dyecav::model::Scene;
use dyecav::solver::{continuation_sweep, find_steady, Dynamics, IntegratorSettings, Model, SteadyState};
use dyecav::{ConfigError, SolverError};

fn config_err(e: ConfigError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn solver_err(e: SolverError) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn list(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// A built scene plus solver settings and, optionally, a hierarchy basis.
#[pyclass(name = "System", module = "dyecav_py")]
struct System {
    scene: Scene,
    basis: Option<HierarchyBasis>,
    settings: IntegratorSettings,
    quench: QuenchSettings,
}

impl System {
    fn from_config(cfg: RunConfig) -> PyResult<Self> {
        cfg.validate().map_err(config_err)?;
        let scene = Scene::build(&cfg.scene).map_err(config_err)?;
        let basis = if cfg.hierarchy.full_field {
            None
        } else {
            Some(build_hierarchy(&scene, cfg.hierarchy.depth).map_err(config_err)?)
        };
        Ok(Self { scene, basis, settings: cfg.solver, quench: cfg.experiment.quench() })
    }

    fn model(&self) -> Model<'_> {
        Model::new(&self.scene, self.basis.as_ref())
    }

    fn steady(&self, p: f64) -> PyResult<SteadyState> {
        let model = self.model();
        let mut seeds = continuation_sweep(&model, &[p], &self.settings);
        seeds.pop().unwrap().map_err(solver_err)
    }
}

fn steady_dict<'py>(py: Python<'py>, ss: &SteadyState) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("P", ss.p)?;
    d.set_item("n", list(ss.n()))?;
    d.set_item("converged", ss.converged)?;
    d.set_item("residual_norm", ss.residual_norm)?;
    d.set_item("newton_iterations", ss.newton_iterations)?;
    if let Some(f) = ss.state.full_field() {
        d.set_item("f", list(f))?;
    }
    Ok(d)
}

#[pymethods]
impl System {
    /// Build from a bundled preset name, e.g. "paper_fig1".
    #[staticmethod]
    #[pyo3(signature = (name, full_field = true, depth = None))]
    fn preset(name: &str, full_field: bool, depth: Option<usize>) -> PyResult<Self> {
        let mut cfg = RunConfig::preset(name).map_err(config_err)?;
        cfg.hierarchy.full_field = full_field;
        if let Some(k) = depth {
            cfg.hierarchy.depth = k;
        }
        Self::from_config(cfg)
    }

    /// Build from TOML text in the same format as the CLI config files.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Self::from_config(RunConfig::parse(text).map_err(config_err)?)
    }

    #[getter]
    fn n_modes(&self) -> usize {
        self.scene.n_modes()
    }

    #[getter]
    fn n_bins(&self) -> usize {
        self.scene.n_bins()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.model().dim()
    }

    /// Mode labels as (mx, my) pairs, in state order.
    fn modes(&self) -> Vec<(usize, usize)> {
        self.scene.modes.modes.iter().map(|m| (m.mx, m.my)).collect()
    }

    fn u_crit(&self) -> Vec<f64> {
        list(&self.scene.u_crit())
    }

    /// Photon and excitation derivatives of the full-field model.
    fn rhs(&self, p: f64, n: Vec<f64>, f: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        if n.len() != self.scene.n_modes() || f.len() != self.scene.n_bins() {
            return Err(PyValueError::new_err("n and f must match the number of modes and bins"));
        }
        let d = kernel::rhs_full_parts(&self.scene, p, &DVector::from_vec(n), &DVector::from_vec(f));
        Ok((list(&d.dn), list(&d.dexcitation)))
    }

    fn steady_state<'py>(&self, py: Python<'py>, p: f64) -> PyResult<Bound<'py, PyDict>> {
        let ss = py.detach(|| self.steady(p))?;
        steady_dict(py, &ss)
    }

    /// Steady states by continuation along `pumps` (ascending order recommended).
    fn sweep<'py>(&self, py: Python<'py>, pumps: Vec<f64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let res = py.detach(|| continuation_sweep(&self.model(), &pumps, &self.settings));
        res.into_iter().map(|r| steady_dict(py, &r.map_err(solver_err)?)).collect()
    }

    /// Detected transitions on the grid `pumps` as (P_crit, (mx, my), kind).
    fn transitions(&self, py: Python<'_>, pumps: Vec<f64>) -> PyResult<Vec<(f64, (usize, usize), String)>> {
        let ts = py.detach(|| {
            let model = self.model();
            let sweep: Result<Vec<SteadyState>, SolverError> = continuation_sweep(&model, &pumps, &self.settings).into_iter().collect();
            analysis::detect_transitions(&model, &sweep?, &self.settings, &DetectSettings::default())
        });
        Ok(ts
            .map_err(solver_err)?
            .into_iter()
            .map(|t| {
                let kind = match t.kind {
                    analysis::TransitionKind::Condensation => "condensation",
                    analysis::TransitionKind::Decondensation => "decondensation",
                };
                (t.p_crit, (t.mode.mx, t.mode.my), kind.to_string())
            })
            .collect())
    }

    /// Quench between the steady states at `p_start` and `p_end`.
    fn equilibration_time<'py>(&self, py: Python<'py>, p_start: f64, p_end: f64) -> PyResult<Bound<'py, PyDict>> {
        let rec = py.detach(|| {
            let start = self.steady(p_start)?;
            let model = self.model();
            let end = find_steady(&model, p_end, &start.y, &self.settings).map_err(solver_err)?;
            experiments::quench_between(&model, &start, &end, &self.quench, &self.settings).map_err(solver_err)
        })?;
        let d = PyDict::new(py);
        d.set_item("P_start", rec.p_start)?;
        d.set_item("P_end", rec.p_end)?;
        d.set_item("t_eq", rec.t_eq)?;
        d.set_item("converged", rec.converged)?;
        d.set_item("delta0", rec.delta0)?;
        d.set_item("n_peak", rec.modes.iter().map(|m| m.n_peak).collect::<Vec<_>>())?;
        d.set_item("t_settle", rec.modes.iter().map(|m| m.t_settle).collect::<Vec<_>>())?;
        Ok(d)
    }
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    dyecav::config::PRESETS.iter().map(|(name, _)| *name).collect()
}

#[pyfunction]
fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    experiments::log_grid(lo, hi, points)
}

#[pymodule]
fn dyecav_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<System>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(log_grid, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
