//! Python bindings: stream functions, flow topology, level-set coefficients,
//! the separatrix chain, the limit kernel, and the diffusivity estimators.
//!
//! Build: `cargo build --release -p hamflow-py`, then import the produced
//! `libhamflow_py.so` as `hamflow_py` (see python/smoke_test.py).

use hamflow::chain::{self, ChainConfig, KernelMethod};
use hamflow::estimator::{self, GreenKuboConfig, MsdConfig};
use hamflow::field::{Preset, StreamFunction as CoreField};
use hamflow::levelcoeffs::{self, CellFrame};
use hamflow::sde::{self, GaussianStream, IntegratorConfig, TrajectoryState};
use hamflow::topology::FlowTopology as CoreTopology;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A periodic stream function as a finite Fourier mode list.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct StreamFunction {
    inner: CoreField,
}

#[pymethods]
impl StreamFunction {
    /// Build from a preset name: "cellular_sine" | "open_channel" | "shear" | "zero".
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let inner = match name {
            "shear" => CoreField::shear(),
            "zero" => CoreField::zero(),
            other => {
                let p: Preset = other.parse().map_err(err)?;
                CoreField::preset(p)
            }
        };
        Ok(StreamFunction { inner })
    }

    /// Parse the textual mode list (one `k1 k2 c_cos c_sin` per line).
    #[staticmethod]
    fn parse(spec: &str) -> PyResult<Self> {
        Ok(StreamFunction { inner: CoreField::parse(spec).map_err(err)? })
    }

    fn to_spec(&self) -> String {
        self.inner.to_spec_string()
    }

    /// H at a point.
    fn h(&self, x: f64, y: f64) -> f64 {
        self.inner.h([x, y])
    }

    /// Velocity (v1, v2) at a point.
    fn velocity(&self, x: f64, y: f64) -> (f64, f64) {
        let v = self.inner.velocity([x, y]);
        (v[0], v[1])
    }

    /// (H, grad, v, laplacian, hessian-row-major) at a point.
    fn evaluate(&self, x: f64, y: f64) -> (f64, (f64, f64), (f64, f64), f64, (f64, f64, f64, f64)) {
        let e = self.inner.evaluate([x, y]);
        (
            e.h,
            (e.grad[0], e.grad[1]),
            (e.v[0], e.v[1]),
            e.laplacian,
            (e.hessian[0][0], e.hessian[0][1], e.hessian[1][0], e.hessian[1][1]),
        )
    }

    fn __repr__(&self) -> String {
        format!("StreamFunction({} modes)", self.inner.modes().len())
    }
}

/// Critical points, separatrices, cells, flow class, and the level-set graph.
#[pyclass]
struct FlowTopology {
    field: CoreField,
    inner: CoreTopology,
}

#[pymethods]
impl FlowTopology {
    #[new]
    fn new(f: &StreamFunction) -> PyResult<Self> {
        let inner = CoreTopology::build(&f.inner).map_err(err)?;
        Ok(FlowTopology { field: f.inner.clone(), inner })
    }

    /// "Cellular" or "OpenChannels".
    fn flow_class(&self) -> String {
        match &self.inner.flow_class {
            hamflow::topology::FlowClass::Cellular => "Cellular".into(),
            hamflow::topology::FlowClass::OpenChannels { .. } => "OpenChannels".into(),
        }
    }

    /// Channel direction (homology class) for open-channel flows.
    fn channel_direction(&self) -> Option<(i32, i32)> {
        match &self.inner.flow_class {
            hamflow::topology::FlowClass::OpenChannels { direction } => {
                Some((direction[0], direction[1]))
            }
            _ => None,
        }
    }

    /// List of (x, y, kind, H, det) critical points.
    fn critical_points(&self) -> Vec<(f64, f64, String, f64, f64)> {
        self.inner
            .critical_points
            .iter()
            .map(|c| {
                (
                    c.location[0],
                    c.location[1],
                    format!("{:?}", c.kind),
                    c.h_value,
                    c.hessian_det,
                )
            })
            .collect()
    }

    fn n_cells(&self) -> usize {
        self.inner.cells.len()
    }

    fn n_edges(&self) -> usize {
        self.inner.edges.len()
    }

    fn cell_areas(&self) -> Vec<f64> {
        self.inner.cells.iter().map(|c| c.area).collect()
    }

    /// Theta length of each separatrix edge.
    fn edge_theta_lengths(&self) -> Vec<f64> {
        self.inner.edges.iter().map(|e| e.theta_length).collect()
    }

    /// Full decomposition as a JSON string (same schema as the CLI export).
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.to_json()).map_err(err)
    }

    /// Level-set coefficient tables (eta, a, b, q, T) for one cell.
    fn coefficients(
        &self,
        cell: usize,
        eta_min: f64,
        n_grid: usize,
    ) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let frame = CellFrame::new(&self.inner, &self.field, cell);
        let grid = levelcoeffs::log_grid(eta_min, frame.eta0 * 0.999, n_grid);
        let c = levelcoeffs::compute_coefficients(&frame, &grid).map_err(err)?;
        Ok((c.eta, c.a, c.b, c.q, c.period))
    }

    /// Run the separatrix chain; returns a dict-like JSON string of the
    /// statistics (mean transit, jump set, diffusivity, ...).
    fn run_chain(
        &self,
        epsilon: f64,
        n_steps: usize,
        seed: u64,
        alpha1: f64,
    ) -> PyResult<String> {
        let cfg = ChainConfig { alpha1, ..ChainConfig::new(epsilon, n_steps, seed) };
        let run = chain::run_chain(&self.field, &self.inner, &cfg).map_err(err)?;
        let d = chain::assemble_diffusivity(&run.stats, epsilon).ok();
        let payload = serde_json::json!({
            "n_transitions": run.stats.n_transitions,
            "mean_transit": run.stats.mean_transit,
            "sqrt_eps_mean_transit": epsilon.sqrt() * run.stats.mean_transit,
            "jump_mean": run.stats.jump_mean,
            "jump_set": run.stats.jump_set,
            "tube_exit_fraction": run.stats.tube_exit_fraction,
            "d_matrix": run.stats.d_matrix,
            "diffusivity": d.map(|e| e.d),
        });
        serde_json::to_string(&payload).map_err(err)
    }

    /// The limiting one-step kernel from (edge, theta): per-bin masses.
    fn limit_kernel(
        &self,
        edge: usize,
        theta: f64,
        m_max: usize,
        bins_per_edge: usize,
        method: &str,
        mc_paths: usize,
        seed: u64,
    ) -> PyResult<(Vec<f64>, f64)> {
        let m = match method {
            "semi_analytic" => KernelMethod::SemiAnalytic,
            "monte_carlo" => KernelMethod::MonteCarlo,
            other => return Err(PyValueError::new_err(format!("unknown method {other}"))),
        };
        let k = chain::limit_kernel_p0(
            &self.inner,
            edge,
            theta,
            m_max,
            bins_per_edge,
            m,
            mc_paths,
            seed,
        )
        .map_err(err)?;
        Ok((k.masses, k.tail_mass))
    }
}

/// One SDE sample path on the torus with winding bookkeeping.
#[pyfunction]
#[pyo3(signature = (f, x0, epsilon, t_end, seed, stream=0, dt_max=1e-3))]
fn integrate_path(
    f: &StreamFunction,
    x0: (f64, f64),
    epsilon: f64,
    t_end: f64,
    seed: u64,
    stream: u64,
    dt_max: f64,
) -> PyResult<((f64, f64), (i64, i64))> {
    let cfg = IntegratorConfig { epsilon, dt_max, ..Default::default() };
    let mut st = TrajectoryState::new([x0.0, x0.1]);
    let mut gs = GaussianStream::new(seed, stream);
    sde::integrate(&f.inner, &cfg, &mut st, &mut gs, t_end).map_err(err)?;
    Ok(((st.torus_pos[0], st.torus_pos[1]), (st.winding[0], st.winding[1])))
}

/// Mean-square-displacement effective diffusivity: returns the 2x2 matrix
/// and its standard errors as ((d11, d12, d22), (se11, se12, se22)).
#[pyfunction]
#[pyo3(signature = (f, epsilon, n_paths, t_final, seed, dt_max=1e-3))]
fn estimate_msd(
    f: &StreamFunction,
    epsilon: f64,
    n_paths: usize,
    t_final: f64,
    seed: u64,
    dt_max: f64,
) -> PyResult<((f64, f64, f64), (f64, f64, f64))> {
    let cfg = MsdConfig { dt_max, ..MsdConfig::new(epsilon, n_paths, t_final, seed) };
    let e = estimator::estimate_msd(&f.inner, &cfg).map_err(err)?;
    Ok((
        (e.d[0][0], e.d[0][1], e.d[1][1]),
        (e.stderr[0][0], e.stderr[0][1], e.stderr[1][1]),
    ))
}

/// Green-Kubo diffusivity of one diagonal component via the accelerated
/// process; returns (value, stderr).
#[pyfunction]
fn estimate_green_kubo(
    f: &StreamFunction,
    epsilon: f64,
    component: usize,
    n_paths: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    if component > 1 {
        return Err(PyValueError::new_err("component must be 0 or 1"));
    }
    let cfg = GreenKuboConfig::new(epsilon, component, n_paths, seed);
    let d = estimator::estimate_green_kubo(&f.inner, &cfg).map_err(err)?;
    Ok((d.estimate.d[component][component], d.estimate.stderr[component][component]))
}

/// Weighted log-log scaling fit; returns (slope, intercept, r_squared, ci).
#[pyfunction]
fn fit_scaling(epsilons: Vec<f64>, values: Vec<f64>) -> PyResult<(f64, f64, f64, f64)> {
    if epsilons.len() != values.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    let estimates: Vec<estimator::EffDiffEstimate> = epsilons
        .iter()
        .zip(&values)
        .map(|(&e, &v)| estimator::EffDiffEstimate {
            d: [[v, 0.0], [0.0, v]],
            stderr: [[0.0; 2]; 2],
            method: estimator::EstimatorMethod::Msd,
            epsilon: e,
            n_paths: 0,
            t_final: 0.0,
        })
        .collect();
    let fit = estimator::fit_scaling(&estimates, (0, 0)).map_err(err)?;
    Ok((fit.slope, fit.intercept, fit.r_squared, fit.slope_ci))
}

#[pymodule]
fn hamflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<StreamFunction>()?;
    m.add_class::<FlowTopology>()?;
    m.add_function(wrap_pyfunction!(integrate_path, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_msd, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_green_kubo, m)?)?;
    m.add_function(wrap_pyfunction!(fit_scaling, m)?)?;
    Ok(())
}
