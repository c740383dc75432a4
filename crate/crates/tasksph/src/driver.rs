//! Run driver: initial conditions, the kick-drift-kick step loop over the
//! task engine, rebuild policy, diagnostics and all file outputs.

use crate::config::{DeviceModelChoice, RunConfig, RunMode};
use crate::devsim::{self, DeviceModel};
use crate::engine::Timeline;
use crate::eos::EosIdealGas;
use crate::error::SolverError;
use crate::exec::{self, DeviceAllocation, ExecMode, PhysicsParams, SharedWorld, StepWorkload};
use crate::ghost::{ConductionParams, HsolveConfig, ViscosityParams};
use crate::gresho::{self, ErrorReport, GreshoIc};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::loops::LoopParams;
use crate::offload::{self, HostExecutor, OffloadConfig, TraceLog, TraceRow};
use crate::system::ParticleSystem;
use crate::tree;
use std::io::Write;
use std::time::Instant;

/// Per-step accounting mirrored into the step-summary CSV.
#[derive(Debug, Clone, Default)]
pub struct StepStats {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub total_step_ms: f64,
    pub mgmt_ms: f64,
    pub outside_task_ms: f64,
    pub sph_task_ms: f64,
    pub task_count: usize,
    pub newton_iterations: u64,
    pub clamped_u: usize,
    pub alpha_v_min: f64,
    pub alpha_v_mean: f64,
    pub alpha_v_max: f64,
    pub mass_total: f64,
    pub momentum_mag: f64,
    pub momentum_scale: f64,
    pub force_balance_mag: f64,
    pub force_balance_scale: f64,
    pub bytes_h2d: u64,
    pub bytes_d2h: u64,
    pub particles_offloaded: u64,
    /// Worst |n_hat h^3 - eta^3| / eta^3 over all particles after the step.
    pub max_closure_residual: f64,
}

#[derive(Debug)]
pub struct RunOutputs {
    pub report: ErrorReport,
    pub steps: Vec<StepStats>,
    pub final_time: f64,
    /// Scheduled task executions across the run, unpack rows included.
    pub total_task_records: usize,
    pub system: ParticleSystem,
    pub sim: Option<devsim::SimTimeline>,
}

pub fn device_model_for(choice: &DeviceModelChoice) -> Result<DeviceModel, SolverError> {
    Ok(match choice {
        DeviceModelChoice::NvlinkLike => DeviceModel::nvlink_like(),
        DeviceModelChoice::Pcie4Like => DeviceModel::pcie4_like(),
        DeviceModelChoice::Custom(p) => DeviceModel::from_file(p)?,
    })
}

fn physics_params(cfg: &RunConfig) -> Result<PhysicsParams, SolverError> {
    let kernel = KernelSpec::new(KernelFamily::CubicSpline, cfg.gamma_k, cfg.eta)?;
    Ok(PhysicsParams {
        loop_params: LoopParams {
            kernel,
            box_side: cfg.box_side as f64,
            visc_beta: cfg.visc_beta,
        },
        eos: EosIdealGas::new(cfg.gamma)?,
        hsolve: HsolveConfig {
            tol: cfg.hsolve_tol,
            max_newton: cfg.hsolve_max_newton,
            max_expand: 8,
        },
        visc: ViscosityParams {
            alpha_max: cfg.alpha_v_max,
            decay_l: cfg.visc_decay_l,
            beta: cfg.visc_beta,
            alpha_init: cfg.alpha_v_init,
        },
        cond: ConductionParams {
            beta_c: cfg.beta_c,
            alpha_min: cfg.alpha_c_min,
            alpha_max: cfg.alpha_c_max,
        },
        eta: cfg.eta,
        c_cfl: cfg.c_cfl,
    })
}

struct ConservationSums {
    mass: f64,
    momentum_mag: f64,
    momentum_scale: f64,
    force_mag: f64,
    force_scale: f64,
}

fn conservation_sums(sys: &ParticleSystem) -> ConservationSums {
    let mut mass = 0.0f64;
    let mut px = 0.0f64;
    let mut py = 0.0f64;
    let mut pz = 0.0f64;
    let mut pscale = 0.0f64;
    let mut fx = 0.0f64;
    let mut fy = 0.0f64;
    let mut fz = 0.0f64;
    let mut fscale = 0.0f64;
    for i in 0..sys.len() {
        let m = sys.mass[i] as f64;
        mass += m;
        px += m * sys.vx[i] as f64;
        py += m * sys.vy[i] as f64;
        pz += m * sys.vz[i] as f64;
        let vmag = ((sys.vx[i] as f64).powi(2)
            + (sys.vy[i] as f64).powi(2)
            + (sys.vz[i] as f64).powi(2))
        .sqrt();
        pscale += m * vmag;
        fx += m * sys.acc_ax[i];
        fy += m * sys.acc_ay[i];
        fz += m * sys.acc_az[i];
        fscale += m * (sys.acc_ax[i].powi(2) + sys.acc_ay[i].powi(2) + sys.acc_az[i].powi(2)).sqrt();
    }
    ConservationSums {
        mass,
        momentum_mag: (px * px + py * py + pz * pz).sqrt(),
        momentum_scale: pscale,
        force_mag: (fx * fx + fy * fy + fz * fz).sqrt(),
        force_scale: fscale,
    }
}

fn max_closure_residual(sys: &ParticleSystem, eta: f64) -> f64 {
    let eta3 = eta * eta * eta;
    let mut worst = 0.0f64;
    for i in 0..sys.len() {
        let h = sys.h[i] as f64;
        let g = (sys.n_hat[i] as f64 * h * h * h - eta3).abs() / eta3;
        worst = worst.max(g);
    }
    worst
}

fn alpha_v_stats(sys: &ParticleSystem) -> (f64, f64, f64) {
    let mut min = f64::INFINITY;
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    for &a in &sys.alpha_v {
        let a = a as f64;
        min = min.min(a);
        max = max.max(a);
        sum += a;
    }
    (min, sum / sys.len().max(1) as f64, max)
}

pub fn write_step_stats_csv<W: Write>(steps: &[StepStats], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "step,t,dt,total_step_ms,initial_task_mgmt_ms,outside_task_ms,sph_task_ms,total_tasks,\
         newton_iterations,clamped_u,alpha_v_min,alpha_v_mean,alpha_v_max,bytes_h2d,bytes_d2h"
    )?;
    for s in steps {
        writeln!(
            out,
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{},{},{},{:.6},{:.6},{:.6},{},{}",
            s.step,
            s.t,
            s.dt,
            s.total_step_ms,
            s.mgmt_ms,
            s.outside_task_ms,
            s.sph_task_ms,
            s.task_count,
            s.newton_iterations,
            s.clamped_u,
            s.alpha_v_min,
            s.alpha_v_mean,
            s.alpha_v_max,
            s.bytes_h2d,
            s.bytes_d2h
        )?;
    }
    Ok(())
}

/// Sum of execution time over the SPH loop subtypes (density/gradient/force
/// tasks, packs and unpacks included).
fn sph_task_ms(tl: &Timeline) -> f64 {
    tl.records
        .iter()
        .filter(|r| r.subtype.is_some())
        .map(|r| (r.t_end_ns - r.t_start_ns) as f64 / 1e6)
        .sum()
}

pub fn run_simulation(cfg: &RunConfig) -> Result<RunOutputs, SolverError> {
    cfg.validate()?;
    let phys = physics_params(cfg)?;
    let offload_cfg = OffloadConfig {
        sp_self: cfg.sp_self,
        sb_self: cfg.sb_self,
        sp_pair: cfg.sp_pair,
        sb_pair: cfg.sb_pair,
        ..Default::default()
    }
    .normalise()?;

    let ic = GreshoIc {
        resolution: cfg.resolution,
        box_side: cfg.box_side,
        rho0: cfg.rho0,
        gamma: cfg.gamma,
        eta: cfg.eta,
        alpha_v_init: cfg.alpha_v_init as f32,
        alpha_c_init: cfg.alpha_c_min as f32,
    };
    let mut sys = gresho::gresho_ic(&ic);
    log::info!(
        "initial conditions: {} particles, box {}, mode {:?}",
        sys.len(),
        cfg.box_side,
        cfg.mode
    );

    // Zero-length runs report on the initial conditions directly.
    if cfg.t_end == 0.0 {
        let report = gresho::error_report(&sys);
        write_outputs(cfg, &sys, &[], &[], None)?;
        return Ok(RunOutputs {
            report,
            steps: Vec::new(),
            final_time: 0.0,
            total_task_records: 0,
            system: sys,
            sim: None,
        });
    }

    let top_grid = cfg.effective_top_grid();
    let mut cell_tree = tree::build_tree(&mut sys, top_grid, cfg.split_threshold)?;
    log::info!("tree: cells per level {:?}", cell_tree.level_histogram());
    let mut world = SharedWorld::new(sys, &cell_tree);

    // Offload machinery lives for the whole run: one backend, buffers
    // allocated once, a trace log in trace mode.
    let backend = if cfg.mode.is_offload() {
        Some(HostExecutor::new(phys.loop_params))
    } else {
        None
    };
    let trace_log = if cfg.mode == RunMode::OffloadTrace { Some(TraceLog::new()) } else { None };

    let mut dec = tree::decompose(&cell_tree, cfg.gamma_k)?;
    let device: Option<DeviceAllocation> = backend.as_ref().map(|be| {
        let alloc =
            exec::allocate_device_buffers(be, cfg.workers, &offload_cfg, dec.max_unit_count);
        let n_p = world.sys_ref().len() as u64;
        let h = world.sys_ref().h[0] as f64;
        let n_c = offload::uniform_cell_count(cfg.box_side as f64, h);
        if let Ok((n_off, m_t)) = offload::device_sizing(n_p, cfg.sp_self as u64, n_c) {
            log::info!(
                "device sizing: {} particles per offload cycle, {} bytes per host thread",
                n_off,
                m_t
            );
        }
        alloc
    });

    let exec_mode = if cfg.mode.is_offload() { ExecMode::Offload } else { ExecMode::Cpu };
    let mut steps: Vec<StepStats> = Vec::new();
    let mut timelines: Vec<Timeline> = Vec::new();
    let mut t = 0.0f64;
    let mut dt_next;
    let mut steps_since_build = 0usize;

    // Priming pass at dt = 0: populates densities, switches, forces and the
    // first timestep without advancing the state.
    {
        let step_graph = exec::build_step_graph(&cell_tree, &dec, exec_mode)?;
        let workload = StepWorkload {
            world: &world,
            tree: &cell_tree,
            dec: &dec,
            meta: &step_graph.meta,
            phys,
            mode: exec_mode,
            dt: 0.0,
            pre_kick_half: 0.0,
            init_step: true,
            offload_cfg,
            backend: backend.as_ref().map(|b| b as &dyn offload::DeviceBackend),
            device: device.as_ref(),
            trace: trace_log.as_ref(),
            agg: std::sync::Mutex::new(Default::default()),
        };
        let opts = crate::engine::RunOptions::new(cfg.workers).with_rr_seed(cfg.seed);
        let (tl, agg) = exec::run_step_with(&workload, &step_graph, opts)?;
        dt_next = agg.dt_min;
        if !dt_next.is_finite() {
            return Err(SolverError::Numerical(
                "no finite timestep after the priming pass".into(),
            ));
        }
        let mut census: std::collections::BTreeMap<&'static str, usize> = Default::default();
        for t in &step_graph.graph.tasks {
            *census.entry(t.kind.label()).or_insert(0) += 1;
        }
        log::info!("task census: {census:?}");
        log::info!(
            "priming pass: {} tasks, first dt {:.3e}, {} newton iterations",
            tl.records.len(),
            dt_next,
            agg.ghost.newton_iterations
        );
        timelines.push(tl);
    }

    let mut step = 0usize;
    while t < cfg.t_end && step < cfg.max_steps {
        // Rebuild policy: every R steps, or when accumulated drift exceeds a
        // quarter of the smallest leaf width.
        let drift_limit = 0.25 * cell_tree.min_leaf_width as f64;
        if steps_since_build >= cfg.rebuild_interval || world.max_drift() > drift_limit {
            let sys_mut = world.sys_mut();
            cell_tree = tree::build_tree(sys_mut, top_grid, cfg.split_threshold)?;
            world.reset_after_rebuild(&cell_tree);
            steps_since_build = 0;
            log::debug!("tree rebuilt at step {step}");
        }
        cell_tree.refresh_h_max(world.sys_ref());
        dec = tree::decompose(&cell_tree, cfg.gamma_k)?;

        let dt = dt_next.min(cfg.t_end - t);
        let wall0 = Instant::now();
        let step_graph = exec::build_step_graph(&cell_tree, &dec, exec_mode)?;
        let build_ms = wall0.elapsed().as_secs_f64() * 1e3;

        let workload = StepWorkload {
            world: &world,
            tree: &cell_tree,
            dec: &dec,
            meta: &step_graph.meta,
            phys,
            mode: exec_mode,
            dt,
            pre_kick_half: 0.5 * dt,
            init_step: false,
            offload_cfg,
            backend: backend.as_ref().map(|b| b as &dyn offload::DeviceBackend),
            device: device.as_ref(),
            trace: trace_log.as_ref(),
            agg: std::sync::Mutex::new(Default::default()),
        };
        let opts = crate::engine::RunOptions::new(cfg.workers).with_rr_seed(cfg.seed);
        let (tl, agg) = exec::run_step_with(&workload, &step_graph, opts)?;
        let total_ms = wall0.elapsed().as_secs_f64() * 1e3;

        dt_next = agg.dt_min;
        if !dt_next.is_finite() || dt_next <= 0.0 {
            return Err(SolverError::Numerical(format!(
                "timestep collapsed to {dt_next} at step {step}"
            )));
        }
        t += dt;
        step += 1;
        steps_since_build += 1;

        if agg.degenerate > 0 {
            log::warn!("step {step}: {} coincident particle pairs skipped", agg.degenerate);
        }

        let sys = world.sys_ref();
        sys.check_state_invariants()?;
        let cons = conservation_sums(sys);
        let (a_min, a_mean, a_max) = alpha_v_stats(sys);
        let first_start = tl.records.iter().map(|r| r.t_start_ns).min().unwrap_or(0);
        let stats = StepStats {
            step,
            t,
            dt,
            total_step_ms: total_ms,
            mgmt_ms: build_ms + first_start as f64 / 1e6,
            outside_task_ms: tl.outside_task_ns() as f64 / 1e6,
            sph_task_ms: sph_task_ms(&tl),
            task_count: tl.records.len(),
            newton_iterations: agg.ghost.newton_iterations,
            clamped_u: agg.clamped_u,
            alpha_v_min: a_min,
            alpha_v_mean: a_mean,
            alpha_v_max: a_max,
            mass_total: cons.mass,
            momentum_mag: cons.momentum_mag,
            momentum_scale: cons.momentum_scale,
            force_balance_mag: cons.force_mag,
            force_balance_scale: cons.force_scale,
            bytes_h2d: agg.bytes_h2d.iter().sum(),
            bytes_d2h: agg.bytes_d2h.iter().sum(),
            particles_offloaded: agg.particles_offloaded.iter().sum(),
            max_closure_residual: max_closure_residual(sys, cfg.eta),
        };
        log::info!(
            "step {step}: t {:.5} dt {:.3e} newton {} clamped_u {} alpha_v {:.3}/{:.3}/{:.3}",
            t,
            dt,
            stats.newton_iterations,
            stats.clamped_u,
            a_min,
            a_mean,
            a_max
        );
        steps.push(stats);
        timelines.push(tl);

        if cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0 {
            if let Some(path) = &cfg.snapshot_out {
                let numbered = path.with_extension(format!("step{step}.txt"));
                let f = std::fs::File::create(&numbered)?;
                world.sys_ref().write_snapshot(std::io::BufWriter::new(f))?;
            }
        }
    }

    let trace_rows = trace_log.as_ref().map(|t| t.snapshot());
    let sim = match (&trace_rows, cfg.mode) {
        (Some(rows), RunMode::OffloadTrace) => {
            let model = device_model_for(&cfg.device_model)?;
            Some(devsim::simulate(rows, &model)?)
        }
        _ => None,
    };

    let sys = world.into_system();
    let report = gresho::error_report(&sys);
    write_outputs(cfg, &sys, &steps, &timelines, trace_rows.as_deref())?;
    if let (Some(sim_tl), Some(trace_path)) = (&sim, &cfg.trace_out) {
        let sim_path = trace_path.with_extension("sim.csv");
        sim_tl.write_csv(std::io::BufWriter::new(std::fs::File::create(&sim_path)?))?;
        let metrics_path = trace_path.with_extension("metrics");
        sim_tl.write_metrics(std::io::BufWriter::new(std::fs::File::create(&metrics_path)?))?;
        log::info!(
            "device simulation: makespan {:.3e} s, overlap {:.3}",
            sim_tl.makespan,
            sim_tl.overlap_fraction
        );
    }

    let total_task_records = timelines.iter().map(|t| t.records.len()).sum();
    log::info!(
        "run complete: t {:.5}, {} steps, L1 v_theta {:.4}, L1 p {:.4}",
        t,
        step,
        report.l1_v_theta,
        report.l1_pressure
    );
    Ok(RunOutputs { report, steps, final_time: t, total_task_records, system: sys, sim })
}

fn write_outputs(
    cfg: &RunConfig,
    sys: &ParticleSystem,
    steps: &[StepStats],
    timelines: &[Timeline],
    trace_rows: Option<&[TraceRow]>,
) -> Result<(), SolverError> {
    if let Some(path) = &cfg.snapshot_out {
        let f = std::fs::File::create(path)?;
        sys.write_snapshot(std::io::BufWriter::new(f))?;
    }
    if let Some(path) = &cfg.timeline_out {
        let f = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(f);
        // Concatenate per-step timelines on a common monotone clock.
        writeln!(out, "worker,task_type,subtype,cell_ids,t_start_ns,t_end_ns")?;
        let mut offset = 0u64;
        for tl in timelines {
            for r in &tl.records {
                let cells = r
                    .cells
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join("+");
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.worker,
                    r.kind.label(),
                    crate::engine::subtype_label(r.subtype),
                    cells,
                    offset + r.t_start_ns,
                    offset + r.t_end_ns
                )?;
            }
            offset += tl.wall_ns;
        }
        let steps_path = path.with_extension("steps.csv");
        let f = std::fs::File::create(&steps_path)?;
        write_step_stats_csv(steps, std::io::BufWriter::new(f))?;
    }
    if let (Some(path), Some(rows)) = (&cfg.trace_out, trace_rows) {
        let f = std::fs::File::create(path)?;
        offload::write_trace_csv(rows, std::io::BufWriter::new(f))?;
    }
    Ok(())
}
