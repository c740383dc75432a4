//! Python bindings: the smoothing kernel, equation of state, analytical
//! vortex profiles, device sizing, initial conditions, full benchmark runs
//! and trace replay through the device simulator.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use tasksph::config::{DeviceModelChoice, RunConfig, RunMode};
use tasksph::error::SolverError;
use tasksph::kernel::{KernelFamily, KernelSpec};

fn maperr(e: SolverError) -> PyErr {
    match e {
        SolverError::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Cubic-spline kernel value and radial derivative at (r, h).
#[pyfunction]
#[pyo3(signature = (r, h, gamma_k = 2.0))]
fn kernel_eval(r: f64, h: f64, gamma_k: f64) -> PyResult<(f64, f64)> {
    let k = KernelSpec::new(KernelFamily::CubicSpline, gamma_k, 1.2348).map_err(maperr)?;
    k.eval(r, h).map_err(maperr)
}

/// Derivative of the kernel with respect to the smoothing length.
#[pyfunction]
#[pyo3(signature = (r, h, gamma_k = 2.0))]
fn kernel_dw_dh(r: f64, h: f64, gamma_k: f64) -> PyResult<f64> {
    let k = KernelSpec::new(KernelFamily::CubicSpline, gamma_k, 1.2348).map_err(maperr)?;
    k.dw_dh(r, h).map_err(maperr)
}

/// Ideal-gas pressure and sound speed.
#[pyfunction]
#[pyo3(signature = (rho, u, gamma = 5.0 / 3.0))]
fn eos_update(rho: f64, u: f64, gamma: f64) -> PyResult<(f64, f64)> {
    let eos = tasksph::eos::EosIdealGas::new(gamma).map_err(maperr)?;
    eos.update(rho, u).map_err(maperr)
}

/// Analytical azimuthal velocity and pressure of the vortex at radius r.
#[pyfunction]
fn analytic_eval(r: f64) -> (f64, f64) {
    tasksph::gresho::analytic_eval(r)
}

/// Particles offloaded per cycle and device bytes per host thread.
#[pyfunction]
fn device_sizing(n_p: u64, s_p: u64, n_c: u64) -> PyResult<(u64, u64)> {
    tasksph::offload::device_sizing(n_p, s_p, n_c).map_err(maperr)
}

/// Particle state snapshot exposed to Python.
#[pyclass]
struct ParticleState {
    sys: tasksph::system::ParticleSystem,
}

#[pymethods]
impl ParticleState {
    fn __len__(&self) -> usize {
        self.sys.len()
    }

    fn positions(&self) -> Vec<(f32, f32, f32)> {
        (0..self.sys.len())
            .map(|i| (self.sys.x[i], self.sys.y[i], self.sys.z[i]))
            .collect()
    }

    fn velocities(&self) -> Vec<(f32, f32, f32)> {
        (0..self.sys.len())
            .map(|i| (self.sys.vx[i], self.sys.vy[i], self.sys.vz[i]))
            .collect()
    }

    fn masses(&self) -> Vec<f32> {
        self.sys.mass.clone()
    }

    fn smoothing_lengths(&self) -> Vec<f32> {
        self.sys.h.clone()
    }

    fn internal_energies(&self) -> Vec<f32> {
        self.sys.u.clone()
    }

    fn densities(&self) -> Vec<f32> {
        self.sys.rho.clone()
    }

    fn pressures(&self) -> Vec<f32> {
        self.sys.pressure.clone()
    }
}

/// Vortex initial conditions on a uniform lattice.
#[pyfunction]
#[pyo3(signature = (resolution, eta = 1.2348))]
fn gresho_ic(resolution: usize, eta: f64) -> PyResult<ParticleState> {
    if resolution < 2 {
        return Err(PyValueError::new_err("resolution must be at least 2"));
    }
    let ic = tasksph::gresho::GreshoIc {
        resolution,
        box_side: 1.0,
        rho0: 1.0,
        gamma: 5.0 / 3.0,
        eta,
        alpha_v_init: 0.1,
        alpha_c_init: 0.0,
    };
    Ok(ParticleState { sys: tasksph::gresho::gresho_ic(&ic) })
}

/// Run the vortex benchmark; returns a summary dict and the final state.
#[pyfunction]
#[pyo3(signature = (resolution = 16, t_end = 0.004, mode = "cpu", workers = 2,
                    sp_self = 256, sb_self = 64, sp_pair = 128, sb_pair = 32))]
#[allow(clippy::too_many_arguments)]
fn run_simulation(
    py: Python<'_>,
    resolution: usize,
    t_end: f64,
    mode: &str,
    workers: usize,
    sp_self: usize,
    sb_self: usize,
    sp_pair: usize,
    sb_pair: usize,
) -> PyResult<(Py<PyDict>, ParticleState)> {
    let cfg = RunConfig {
        resolution,
        t_end,
        mode: RunMode::parse(mode).map_err(maperr)?,
        workers,
        sp_self,
        sb_self,
        sp_pair,
        sb_pair,
        ..Default::default()
    };
    let out = py
        .detach(|| tasksph::driver::run_simulation(&cfg))
        .map_err(maperr)?;
    let d = PyDict::new(py);
    d.set_item("steps", out.steps.len())?;
    d.set_item("final_time", out.final_time)?;
    d.set_item("l1_v_theta", out.report.l1_v_theta)?;
    d.set_item("l1_pressure", out.report.l1_pressure)?;
    d.set_item("plateau_pressure", out.report.plateau_pressure_mean)?;
    d.set_item("total_task_records", out.total_task_records)?;
    Ok((d.into(), ParticleState { sys: out.system }))
}

/// Replay a device trace CSV through the discrete-event simulator.
#[pyfunction]
#[pyo3(signature = (path, device_model = "nvlink-like"))]
fn simulate_trace(py: Python<'_>, path: &str, device_model: &str) -> PyResult<Py<PyDict>> {
    let choice = DeviceModelChoice::parse(device_model).map_err(maperr)?;
    let model = tasksph::driver::device_model_for(&choice).map_err(maperr)?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| PyValueError::new_err(format!("cannot read {path}: {e}")))?;
    let rows = tasksph::offload::parse_trace_csv(&text).map_err(maperr)?;
    let tl = tasksph::devsim::simulate(&rows, &model).map_err(maperr)?;
    let d = PyDict::new(py);
    d.set_item("ops", tl.ops.len())?;
    d.set_item("makespan", tl.makespan)?;
    d.set_item("overlap_fraction", tl.overlap_fraction)?;
    d.set_item("busy_h2d", tl.busy_h2d)?;
    d.set_item("busy_d2h", tl.busy_d2h)?;
    d.set_item("busy_kernel", tl.busy_kernel)?;
    Ok(d.into())
}

#[pymodule]
fn tasksph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kernel_eval, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_dw_dh, m)?)?;
    m.add_function(wrap_pyfunction!(eos_update, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_eval, m)?)?;
    m.add_function(wrap_pyfunction!(device_sizing, m)?)?;
    m.add_function(wrap_pyfunction!(gresho_ic, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_trace, m)?)?;
    m.add_class::<ParticleState>()?;
    Ok(())
}
