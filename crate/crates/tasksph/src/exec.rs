//! Physics task bodies and the per-step task graph factory.
//!
//! The scheduler is generic; this module supplies the workload that turns
//! tasks into SPH work. In cpu mode the loop tasks run the interaction units
//! directly (recursing through daughters for sub tasks); in offload mode the
//! same units are staged into pack buffers and flow through the device
//! pipeline, with dependents gated on the unpack.

use crate::engine::{self, Hooks, Task, TaskGraph, TaskId, TaskKind, Workload};
use crate::eos::EosIdealGas;
use crate::error::SolverError;
use crate::ghost::{self, ConductionParams, GhostStats, HsolveConfig, ViscosityParams};
use crate::loops::{self, LoopKind, LoopParams, PairWalk, SideMap};
use crate::offload::{
    BufferId, DeviceBackend, DeviceOp, OffloadConfig, PackBuffer, PackKind, PackSide, TraceLog,
    TraceOp, TraceRow,
};
use crate::records::*;
use crate::system::ParticleSystem;
use crate::tree::{self, CellId, CellTree, Decomposition, SortedList};
use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

// ---------------------------------------------------------------------------
// Shared mutable state
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct CellSorts {
    pub lists: [Option<SortedList>; 13],
    pub dirty: [bool; 13],
}

#[derive(Debug, Default)]
pub struct SortStore {
    pub cells: Vec<CellSorts>,
}

impl SortStore {
    pub fn for_tree(tree: &CellTree) -> Self {
        SortStore {
            cells: (0..tree.cells.len()).map(|_| CellSorts::default()).collect(),
        }
    }
}

/// Particle state and sort lists shared across workers during a step.
///
/// Safety contract: tasks mutate only the cell ranges named in their lock
/// sets, which the scheduler holds exclusively during execution; scatter
/// writes outside task execution take the same locks via `Hooks::lock_cells`.
/// Reads of other cells' positions and velocities only happen in phases
/// where the dependency graph guarantees those fields are quiescent.
pub struct SharedWorld {
    sys: UnsafeCell<ParticleSystem>,
    sorts: UnsafeCell<SortStore>,
    /// Max displacement per top cell since the last tree build.
    drift_max: UnsafeCell<Vec<f64>>,
}

unsafe impl Sync for SharedWorld {}

impl SharedWorld {
    pub fn new(sys: ParticleSystem, tree: &CellTree) -> Self {
        SharedWorld {
            sys: UnsafeCell::new(sys),
            sorts: UnsafeCell::new(SortStore::for_tree(tree)),
            drift_max: UnsafeCell::new(vec![0.0; tree.top_cells.len()]),
        }
    }

    /// Exclusive access from the single-threaded driver between steps.
    pub fn sys_mut(&mut self) -> &mut ParticleSystem {
        self.sys.get_mut()
    }

    pub fn sys_ref(&mut self) -> &ParticleSystem {
        self.sys.get_mut()
    }

    pub fn reset_after_rebuild(&mut self, tree: &CellTree) {
        *self.sorts.get_mut() = SortStore::for_tree(tree);
        *self.drift_max.get_mut() = vec![0.0; tree.top_cells.len()];
    }

    pub fn max_drift(&mut self) -> f64 {
        self.drift_max.get_mut().iter().copied().fold(0.0, f64::max)
    }

    pub fn into_system(self) -> ParticleSystem {
        self.sys.into_inner()
    }

    /// # Safety
    /// Caller must hold the scheduler locks covering every cell range it
    /// touches through the returned reference.
    #[allow(clippy::mut_from_ref)]
    unsafe fn sys_unlocked(&self) -> &mut ParticleSystem {
        &mut *self.sys.get()
    }

    /// # Safety
    /// Same locking contract as [`sys_unlocked`](Self::sys_unlocked) for the
    /// cells whose sort lists are touched.
    #[allow(clippy::mut_from_ref)]
    unsafe fn sorts_unlocked(&self) -> &mut SortStore {
        &mut *self.sorts.get()
    }

    #[allow(clippy::mut_from_ref)]
    unsafe fn drift_unlocked(&self) -> &mut Vec<f64> {
        &mut *self.drift_max.get()
    }
}

// ---------------------------------------------------------------------------
// Physics parameters bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct PhysicsParams {
    pub loop_params: LoopParams,
    pub eos: EosIdealGas,
    pub hsolve: HsolveConfig,
    pub visc: ViscosityParams,
    pub cond: ConductionParams,
    pub eta: f64,
    pub c_cfl: f64,
}

// ---------------------------------------------------------------------------
// Step graph construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Cpu,
    Offload,
}

#[derive(Debug, Clone, Copy)]
pub enum TaskMeta {
    Drift { top: CellId, top_index: usize },
    Sort { top: CellId, top_index: usize },
    LoopSelf { top: CellId, top_index: usize, loop_kind: LoopKind },
    LoopPair { cross_index: usize, loop_kind: LoopKind },
    Ghost { top: CellId },
    ExtraGhost { top: CellId },
    Kick { top: CellId },
    Timestep { top: CellId },
    PackSelf { unit: usize, loop_kind: LoopKind },
    PackPair { unit: usize, loop_kind: LoopKind },
}

pub struct StepGraph {
    pub graph: TaskGraph,
    pub meta: Vec<TaskMeta>,
}

const LOOPS: [LoopKind; 3] = [LoopKind::Density, LoopKind::Gradient, LoopKind::Force];

/// Build one step's task graph over the tree decomposition.
///
/// Per top-level cell: drift -> sort -> density stage -> ghost -> gradient
/// stage -> extra ghost -> force stage -> kick -> timestep. In cpu mode each
/// stage is one self task per cell plus one pair task per adjacent cell pair
/// (sub variants when they recurse below the top level); in offload mode the
/// stages become one pack task per interaction-level unit, whose dependents
/// are only released by the unpack.
pub fn build_step_graph(
    tree: &CellTree,
    dec: &Decomposition,
    mode: ExecMode,
) -> Result<StepGraph, SolverError> {
    let mut graph = TaskGraph::new(tree.top_cells.len());
    let mut meta: Vec<TaskMeta> = Vec::new();
    let n_top = tree.top_cells.len();

    let occupied: Vec<bool> = tree
        .top_cells
        .iter()
        .map(|&t| tree.cells[t as usize].count > 0)
        .collect();

    let add = |graph: &mut TaskGraph,
                   meta: &mut Vec<TaskMeta>,
                   kind: TaskKind,
                   subtype: Option<LoopKind>,
                   cells: Vec<u32>,
                   m: TaskMeta|
     -> TaskId {
        let payload = meta.len() as u32;
        meta.push(m);
        let locks: Vec<u32> = cells
            .iter()
            .map(|&c| top_lock_index(tree, c))
            .collect();
        graph.add_task(kind, subtype, cells, locks, payload)
    };

    let mut drift = vec![TaskId::MAX; n_top];
    let mut sort = vec![TaskId::MAX; n_top];
    let mut ghost_t = vec![TaskId::MAX; n_top];
    let mut eghost = vec![TaskId::MAX; n_top];
    let mut kick_t = vec![TaskId::MAX; n_top];

    for ti in 0..n_top {
        if !occupied[ti] {
            continue;
        }
        let top = tree.top_cells[ti];
        drift[ti] = add(&mut graph, &mut meta, TaskKind::Drift, None, vec![top], TaskMeta::Drift { top, top_index: ti });
        sort[ti] = add(&mut graph, &mut meta, TaskKind::Sort, None, vec![top], TaskMeta::Sort { top, top_index: ti });
        ghost_t[ti] = add(&mut graph, &mut meta, TaskKind::Ghost, None, vec![top], TaskMeta::Ghost { top });
        eghost[ti] = add(&mut graph, &mut meta, TaskKind::ExtraGhost, None, vec![top], TaskMeta::ExtraGhost { top });
        kick_t[ti] = add(&mut graph, &mut meta, TaskKind::Kick, None, vec![top], TaskMeta::Kick { top });
        let ts = add(&mut graph, &mut meta, TaskKind::Timestep, None, vec![top], TaskMeta::Timestep { top });
        graph.add_edge(drift[ti], sort[ti]);
        graph.add_edge(kick_t[ti], ts);
    }

    // Stage boundaries per loop: what a loop task waits on and what waits on
    // it, per involved top cell.
    let stage_in = |loop_kind: LoopKind, ti: usize| -> TaskId {
        match loop_kind {
            LoopKind::Density => sort[ti],
            LoopKind::Gradient => ghost_t[ti],
            LoopKind::Force => eghost[ti],
        }
    };
    let stage_out = |loop_kind: LoopKind, ti: usize| -> TaskId {
        match loop_kind {
            LoopKind::Density => ghost_t[ti],
            LoopKind::Gradient => eghost[ti],
            LoopKind::Force => kick_t[ti],
        }
    };

    match mode {
        ExecMode::Cpu => {
            for ti in 0..n_top {
                if !occupied[ti] {
                    continue;
                }
                let top = tree.top_cells[ti];
                let single_unit = dec.top_self_units[ti].len() == 1
                    && dec.top_internal_pairs[ti].is_empty()
                    && dec.self_units[dec.top_self_units[ti][0] as usize] == top;
                let kind = if single_unit { TaskKind::SelfTask } else { TaskKind::SubSelf };
                for loop_kind in LOOPS {
                    let t = add(
                        &mut graph,
                        &mut meta,
                        kind,
                        Some(loop_kind),
                        vec![top],
                        TaskMeta::LoopSelf { top, top_index: ti, loop_kind },
                    );
                    graph.add_edge(stage_in(loop_kind, ti), t);
                    graph.add_edge(t, stage_out(loop_kind, ti));
                }
            }
            for (ci, (a, b, units)) in dec.top_cross_pairs.iter().enumerate() {
                if units.is_empty() {
                    continue;
                }
                let (ta, tb) = (top_lock_index(tree, *a) as usize, top_lock_index(tree, *b) as usize);
                let plain = units.len() == 1 && {
                    let u = &dec.pair_units[units[0] as usize];
                    u.a == *a && u.b == *b
                };
                let kind = if plain { TaskKind::PairTask } else { TaskKind::SubPair };
                for loop_kind in LOOPS {
                    let t = add(
                        &mut graph,
                        &mut meta,
                        kind,
                        Some(loop_kind),
                        vec![*a, *b],
                        TaskMeta::LoopPair { cross_index: ci, loop_kind },
                    );
                    graph.add_edge(stage_in(loop_kind, ta), t);
                    graph.add_edge(stage_in(loop_kind, tb), t);
                    graph.add_edge(t, stage_out(loop_kind, ta));
                    graph.add_edge(t, stage_out(loop_kind, tb));
                }
            }
        }
        ExecMode::Offload => {
            for (ui, &cell) in dec.self_units.iter().enumerate() {
                let ti = top_lock_index(tree, cell) as usize;
                for loop_kind in LOOPS {
                    let t = add(
                        &mut graph,
                        &mut meta,
                        TaskKind::Pack,
                        Some(loop_kind),
                        vec![tree.top_cells[ti]],
                        TaskMeta::PackSelf { unit: ui, loop_kind },
                    );
                    graph.set_deferred_unlock(t);
                    graph.add_edge(stage_in(loop_kind, ti), t);
                    graph.add_edge(t, stage_out(loop_kind, ti));
                }
            }
            for (ui, unit) in dec.pair_units.iter().enumerate() {
                let ta = top_lock_index(tree, unit.a) as usize;
                let tb = top_lock_index(tree, unit.b) as usize;
                for loop_kind in LOOPS {
                    let t = add(
                        &mut graph,
                        &mut meta,
                        TaskKind::Pack,
                        Some(loop_kind),
                        vec![tree.top_cells[ta], tree.top_cells[tb]],
                        TaskMeta::PackPair { unit: ui, loop_kind },
                    );
                    graph.set_deferred_unlock(t);
                    graph.add_edge(stage_in(loop_kind, ta), t);
                    if tb != ta {
                        graph.add_edge(stage_in(loop_kind, tb), t);
                    }
                    graph.add_edge(t, stage_out(loop_kind, ta));
                    if tb != ta {
                        graph.add_edge(t, stage_out(loop_kind, tb));
                    }
                }
            }
        }
    }

    Ok(StepGraph { graph, meta })
}

/// Index of a cell's top-level ancestor in the top grid (also its lock id).
pub fn top_lock_index(tree: &CellTree, mut cell: CellId) -> u32 {
    while let Some(p) = tree.cells[cell as usize].parent {
        cell = p;
    }
    cell
}

// ---------------------------------------------------------------------------
// Record encoding and result scatter
// ---------------------------------------------------------------------------

fn encode_density(sys: &ParticleSystem, first: usize, count: usize, cf: i32, cl: i32, out: &mut Vec<SendRecordDensity>) {
    for i in first..first + count {
        out.push(SendRecordDensity {
            x: [sys.x[i], sys.y[i], sys.z[i]],
            h: sys.h[i],
            v: [sys.vx[i], sys.vy[i], sys.vz[i]],
            m: sys.mass[i],
            cf,
            cl,
        });
    }
}

fn encode_gradient(sys: &ParticleSystem, first: usize, count: usize, cf: i32, cl: i32, out: &mut Vec<SendRecordGradient>) {
    for i in first..first + count {
        out.push(SendRecordGradient {
            x: [sys.x[i], sys.y[i], sys.z[i]],
            h: sys.h[i],
            v: [sys.vx[i], sys.vy[i], sys.vz[i]],
            rho: sys.rho[i],
            p: sys.pressure[i],
            cs: sys.sound_speed[i],
            u: sys.u[i],
            m: sys.mass[i],
            cf,
            cl,
        });
    }
}

fn encode_force(sys: &ParticleSystem, first: usize, count: usize, cf: i32, cl: i32, out: &mut Vec<SendRecordForce>) {
    for i in first..first + count {
        out.push(SendRecordForce {
            x: [sys.x[i], sys.y[i], sys.z[i]],
            h: sys.h[i],
            v: [sys.vx[i], sys.vy[i], sys.vz[i]],
            m: sys.mass[i],
            rho: sys.rho[i],
            p: sys.pressure[i],
            cs: sys.sound_speed[i],
            u: sys.u[i],
            f: sys.h_factor[i],
            alpha_v_bal: sys.alpha_v[i] * sys.balsara[i],
            alpha_c: sys.alpha_c[i],
            v_sig: sys.v_sig[i],
            cf,
            cl,
        });
    }
}

fn scatter_density(sys: &mut ParticleSystem, recs: &[RecvRecordDensity], sys_first: usize, count: usize, rec_off: usize) {
    for k in 0..count {
        let i = sys_first + k;
        let r = &recs[rec_off + k];
        sys.acc_rho[i] += r.rho as f64;
        sys.acc_rho_dh[i] += r.rho_dh as f64;
        sys.acc_wcount[i] += r.wcount as f64;
        sys.acc_wcount_dh[i] += r.wcount_dh as f64;
        sys.acc_div[i] += r.div as f64;
        for c in 0..3 {
            sys.acc_curl[c][i] += r.curl[c] as f64;
        }
    }
}

fn scatter_gradient(sys: &mut ParticleSystem, recs: &[RecvRecordGradient], sys_first: usize, count: usize, rec_off: usize) {
    for k in 0..count {
        let i = sys_first + k;
        let r = &recs[rec_off + k];
        sys.v_sig[i] = sys.v_sig[i].max(r.v_sig);
        sys.acc_lap_u[i] += r.lap_u as f64;
    }
}

fn scatter_force(sys: &mut ParticleSystem, recs: &[RecvRecordForce], sys_first: usize, count: usize, rec_off: usize) {
    for k in 0..count {
        let i = sys_first + k;
        let r = &recs[rec_off + k];
        sys.acc_ax[i] += r.a[0] as f64;
        sys.acc_ay[i] += r.a[1] as f64;
        sys.acc_az[i] += r.a[2] as f64;
        sys.acc_du_dt[i] += r.du_dt as f64;
        sys.v_sig[i] = sys.v_sig[i].max(r.v_sig);
        sys.acc_h_dt[i] += r.h_dt as f64;
    }
}

// ---------------------------------------------------------------------------
// CPU-path unit execution
// ---------------------------------------------------------------------------

/// Worker-local scratch for building batches and results.
#[derive(Default)]
pub struct Scratch {
    send_d: Vec<SendRecordDensity>,
    recv_d: Vec<RecvRecordDensity>,
    send_g: Vec<SendRecordGradient>,
    recv_g: Vec<RecvRecordGradient>,
    send_f: Vec<SendRecordForce>,
    recv_f: Vec<RecvRecordForce>,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct UnitStats {
    pub degenerate: u64,
    pub examined: u64,
    pub possible: u64,
}

/// Run a self unit in place: encode, double loop, scatter.
pub fn run_self_unit(
    sys: &mut ParticleSystem,
    cell_first: usize,
    cell_count: usize,
    loop_kind: LoopKind,
    params: &LoopParams,
    scratch: &mut Scratch,
) -> UnitStats {
    let n = cell_count;
    let (cf, cl) = (0i32, n as i32 - 1);
    let mut stats = UnitStats::default();
    match loop_kind {
        LoopKind::Density => {
            scratch.send_d.clear();
            encode_density(sys, cell_first, n, cf, cl, &mut scratch.send_d);
            scratch.recv_d.clear();
            scratch.recv_d.resize(n, Default::default());
            stats.degenerate =
                loops::density_kernel(&scratch.send_d, 0, n, &mut scratch.recv_d, params);
            scatter_density(sys, &scratch.recv_d, cell_first, n, 0);
        }
        LoopKind::Gradient => {
            scratch.send_g.clear();
            encode_gradient(sys, cell_first, n, cf, cl, &mut scratch.send_g);
            scratch.recv_g.clear();
            scratch.recv_g.resize(n, Default::default());
            stats.degenerate =
                loops::gradient_kernel(&scratch.send_g, 0, n, &mut scratch.recv_g, params);
            scatter_gradient(sys, &scratch.recv_g, cell_first, n, 0);
        }
        LoopKind::Force => {
            scratch.send_f.clear();
            encode_force(sys, cell_first, n, cf, cl, &mut scratch.send_f);
            scratch.recv_f.clear();
            scratch.recv_f.resize(n, Default::default());
            stats.degenerate =
                loops::force_kernel(&scratch.send_f, 0, n, &mut scratch.recv_f, params);
            scatter_force(sys, &scratch.recv_f, cell_first, n, 0);
        }
    }
    stats
}

struct PairGeomInfo<'a> {
    list_a: &'a SortedList,
    list_b: &'a SortedList,
    shift_scalar: f64,
    a_first: usize,
    a_count: usize,
    b_first: usize,
    b_count: usize,
    h_max_a: f64,
    h_max_b: f64,
}

/// Run a pair unit through the sorted projection walk. Both gather
/// directions are executed; candidates are visited in ascending record index
/// so the sums are bit-identical to the plain double loop.
pub fn run_pair_unit(
    sys: &mut ParticleSystem,
    sorts: &SortStore,
    tree: &CellTree,
    unit: &tree::PairUnit,
    loop_kind: LoopKind,
    params: &LoopParams,
    scratch: &mut Scratch,
) -> Result<UnitStats, SolverError> {
    let ca = &tree.cells[unit.a as usize];
    let cb = &tree.cells[unit.b as usize];
    let axis = unit.geom.axis;
    let get_list = |cell: CellId| -> Result<&SortedList, SolverError> {
        sorts.cells[cell as usize].lists[axis].as_ref().ok_or_else(|| {
            SolverError::Internal(format!("missing sort list for cell {cell} axis {axis}"))
        })
    };
    let u = tree::axis_unit(axis);
    let shift_scalar =
        unit.geom.shift[0] * u[0] + unit.geom.shift[1] * u[1] + unit.geom.shift[2] * u[2];
    let info = PairGeomInfo {
        list_a: get_list(unit.a)?,
        list_b: get_list(unit.b)?,
        shift_scalar,
        a_first: ca.first,
        a_count: ca.count,
        b_first: cb.first,
        b_count: cb.count,
        h_max_a: ca.h_max as f64,
        h_max_b: cb.h_max as f64,
    };

    let mut stats = UnitStats::default();
    stats.possible = (info.a_count * info.b_count) as u64 * 2;

    macro_rules! walk_loop {
        ($send:ident, $recv:ident, $encode:ident, $term:path, $accum:ty, $scatter:ident, $force:expr) => {{
            scratch.$send.clear();
            let na = info.a_count as i32;
            let nb = info.b_count as i32;
            // A records gather from B's block and vice versa.
            $encode(sys, info.a_first, info.a_count, na, na + nb - 1, &mut scratch.$send);
            $encode(sys, info.b_first, info.b_count, 0, na - 1, &mut scratch.$send);
            scratch.$recv.clear();
            scratch.$recv.resize(info.a_count + info.b_count, Default::default());

            let recs = &scratch.$send;
            let out = &mut scratch.$recv;
            let gamma_k = params.kernel.gamma_k;
            let mut degen = 0u64;
            for dir in 0..2 {
                let (active_list, other_list, active_map, other_map, shift, h_other) = if dir == 0 {
                    (
                        info.list_a,
                        info.list_b,
                        SideMap { sys_first: info.a_first, rec_first: 0, count: info.a_count },
                        SideMap {
                            sys_first: info.b_first,
                            rec_first: info.a_count,
                            count: info.b_count,
                        },
                        info.shift_scalar,
                        info.h_max_b,
                    )
                } else {
                    (
                        info.list_b,
                        info.list_a,
                        SideMap {
                            sys_first: info.b_first,
                            rec_first: info.a_count,
                            count: info.b_count,
                        },
                        SideMap { sys_first: info.a_first, rec_first: 0, count: info.a_count },
                        -info.shift_scalar,
                        info.h_max_a,
                    )
                };
                let walk = PairWalk {
                    active_list,
                    other_list,
                    active_map,
                    other_map,
                    other_shift: shift,
                };
                let examined = walk.run(
                    |rec_i| {
                        let h = recs[rec_i].h as f64;
                        if $force {
                            gamma_k * h.max(h_other)
                        } else {
                            gamma_k * h
                        }
                    },
                    |rec_i, cands| {
                        let mut acc = <$accum>::default();
                        for &j in cands {
                            $term(&mut acc, &recs[rec_i], &recs[j], params);
                        }
                        degen += acc.degenerate;
                        out[rec_i] = acc.to_record();
                    },
                );
                stats.examined += examined as u64;
            }
            stats.degenerate = degen;
            $scatter(sys, &scratch.$recv, info.a_first, info.a_count, 0);
            $scatter(sys, &scratch.$recv, info.b_first, info.b_count, info.a_count);
        }};
    }

    match loop_kind {
        LoopKind::Density => walk_loop!(
            send_d,
            recv_d,
            encode_density,
            loops::density_term,
            loops::DensityAccum,
            scatter_density,
            false
        ),
        LoopKind::Gradient => walk_loop!(
            send_g,
            recv_g,
            encode_gradient,
            loops::gradient_term,
            loops::GradientAccum,
            scatter_gradient,
            false
        ),
        LoopKind::Force => walk_loop!(
            send_f,
            recv_f,
            encode_force,
            loops::force_term,
            loops::ForceAccum,
            scatter_force,
            true
        ),
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Offload path
// ---------------------------------------------------------------------------

/// Device buffer handles for one (loop, pack kind) slot of one worker.
#[derive(Debug, Clone, Copy)]
pub struct DevBufPair {
    pub send: BufferId,
    pub recv: BufferId,
    pub send_cap: usize,
    pub recv_cap: usize,
}

/// Device allocations made once at simulation start, plus the global event
/// and bundle counters.
pub struct DeviceAllocation {
    pub per_worker: Vec<[DevBufPair; 6]>,
    pub event_counter: AtomicU64,
    pub bundle_counter: AtomicU64,
}

pub fn buffer_slot(loop_kind: LoopKind, kind: PackKind) -> usize {
    let l = match loop_kind {
        LoopKind::Density => 0,
        LoopKind::Gradient => 1,
        LoopKind::Force => 2,
    };
    let k = match kind {
        PackKind::SelfPack => 0,
        PackKind::PairPack => 1,
    };
    l * 2 + k
}

pub fn slot_kinds(slot: usize) -> (LoopKind, PackKind) {
    let l = match slot / 2 {
        0 => LoopKind::Density,
        1 => LoopKind::Gradient,
        _ => LoopKind::Force,
    };
    let k = if slot % 2 == 0 { PackKind::SelfPack } else { PackKind::PairPack };
    (l, k)
}

/// Allocate the per-worker, per-loop, per-direction device buffers, sized for
/// S_p tasks of the largest interaction unit.
pub fn allocate_device_buffers(
    backend: &dyn DeviceBackend,
    workers: usize,
    cfg: &OffloadConfig,
    max_unit_particles: usize,
) -> DeviceAllocation {
    let mut per_worker = Vec::with_capacity(workers);
    for _ in 0..workers {
        let mut slots = [DevBufPair { send: 0, recv: 0, send_cap: 0, recv_cap: 0 }; 6];
        for (slot, entry) in slots.iter_mut().enumerate() {
            let (loop_kind, kind) = slot_kinds(slot);
            // Headroom over the worst unit observed at allocation time, in
            // case a rebuild coarsens cells slightly.
            let particles = cfg.pack_size(kind) * max_unit_particles * 2;
            let send_cap = particles * loop_kind.send_size();
            let recv_cap = particles * loop_kind.recv_size();
            *entry = DevBufPair {
                send: backend.allocate(send_cap),
                recv: backend.allocate(recv_cap),
                send_cap,
                recv_cap,
            };
        }
        per_worker.push(slots);
    }
    DeviceAllocation {
        per_worker,
        event_counter: AtomicU64::new(0),
        bundle_counter: AtomicU64::new(0),
    }
}

// ---------------------------------------------------------------------------
// The step workload
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StepAggregates {
    pub dt_min: f64,
    pub ghost: GhostStats,
    pub clamped_u: usize,
    pub degenerate: u64,
    pub pair_examined: u64,
    pub pair_possible: u64,
    pub max_drift: f64,
    /// Per loop: bytes sent, bytes received, particles offloaded.
    pub bytes_h2d: [u64; 3],
    pub bytes_d2h: [u64; 3],
    pub particles_offloaded: [u64; 3],
    pub unpack_count: u64,
}

impl Default for StepAggregates {
    fn default() -> Self {
        StepAggregates {
            dt_min: f64::INFINITY,
            ghost: GhostStats::default(),
            clamped_u: 0,
            degenerate: 0,
            pair_examined: 0,
            pair_possible: 0,
            max_drift: 0.0,
            bytes_h2d: [0; 3],
            bytes_d2h: [0; 3],
            particles_offloaded: [0; 3],
            unpack_count: 0,
        }
    }
}

impl StepAggregates {
    fn new() -> Self {
        Self::default()
    }
}

pub struct StepWorkload<'a> {
    pub world: &'a SharedWorld,
    pub tree: &'a CellTree,
    pub dec: &'a Decomposition,
    pub meta: &'a [TaskMeta],
    pub phys: PhysicsParams,
    pub mode: ExecMode,
    pub dt: f64,
    pub pre_kick_half: f64,
    /// First (priming) pass: switches are initialised, not evolved.
    pub init_step: bool,
    pub offload_cfg: OffloadConfig,
    pub backend: Option<&'a dyn DeviceBackend>,
    pub device: Option<&'a DeviceAllocation>,
    pub trace: Option<&'a TraceLog>,
    pub agg: Mutex<StepAggregates>,
}

impl<'a> StepWorkload<'a> {
    pub fn new_cpu(
        world: &'a SharedWorld,
        tree: &'a CellTree,
        dec: &'a Decomposition,
        meta: &'a [TaskMeta],
        phys: PhysicsParams,
        dt: f64,
        pre_kick_half: f64,
        init_step: bool,
    ) -> Self {
        StepWorkload {
            world,
            tree,
            dec,
            meta,
            phys,
            mode: ExecMode::Cpu,
            dt,
            pre_kick_half,
            init_step,
            offload_cfg: OffloadConfig::default(),
            backend: None,
            device: None,
            trace: None,
            agg: Mutex::new(StepAggregates::new()),
        }
    }

    pub fn take_aggregates(&self) -> StepAggregates {
        std::mem::replace(&mut self.agg.lock().unwrap(), StepAggregates::new())
    }

    fn flush_buffer(
        &self,
        worker: usize,
        buf: &mut PackBuffer,
        hooks: &Hooks,
    ) -> Result<(), SolverError> {
        if buf.is_empty() {
            return Ok(());
        }
        let backend = self.backend.expect("offload path requires a backend");
        let device = self.device.expect("offload path requires device buffers");
        let trace = self.trace;
        let slot = buffer_slot(buf.loop_kind, buf.kind);
        let dev = device.per_worker[worker][slot];
        let send_size = buf.loop_kind.send_size();
        let recv_size = buf.loop_kind.recv_size();
        if buf.n_records * send_size > dev.send_cap {
            return Err(SolverError::Internal(format!(
                "device send buffer exhausted ({} > {} bytes): sizing bug",
                buf.n_records * send_size,
                dev.send_cap
            )));
        }

        let sb = self.offload_cfg.bundle_size(buf.kind);
        let pool = self.offload_cfg.stream_pool(buf.kind);
        let bundles = buf.bundles(sb);
        let mut events = Vec::with_capacity(bundles.len());

        for (k, b) in bundles.iter().enumerate() {
            let stream =
                (worker * self.offload_cfg.stream_pool_cap.max(1) + (k % pool)) as u32;
            let event = device.event_counter.fetch_add(1, Ordering::Relaxed);
            let bundle_id = device.bundle_counter.fetch_add(1, Ordering::Relaxed);
            events.push((event, bundle_id, stream, *b));

            let send_off = b.first_rec * send_size;
            let send_len = b.n_rec * send_size;
            let recv_off = b.first_rec * recv_size;
            let recv_len = b.n_rec * recv_size;

            let submit = |op: DeviceOp, kind: TraceOp, amount: u64| {
                let t_submit = trace.map(|t| t.now()).unwrap_or(0.0);
                backend.submit(stream, op);
                if let Some(t) = trace {
                    let t_end = t.now();
                    t.push(TraceRow {
                        worker: worker as u32,
                        stream,
                        op: kind,
                        loop_kind: buf.loop_kind,
                        bundle: bundle_id,
                        bytes_or_tasks: amount,
                        particles: b.particles,
                        interactions: b.interactions,
                        t_submit,
                        t_start: t_submit,
                        t_end,
                    });
                }
            };

            submit(
                DeviceOp::CopyToDevice {
                    buf: dev.send,
                    offset: send_off,
                    bytes: buf.send_bytes[send_off..send_off + send_len].to_vec(),
                },
                TraceOp::H2d,
                send_len as u64,
            );
            submit(
                DeviceOp::Kernel {
                    loop_kind: buf.loop_kind,
                    in_buf: dev.send,
                    out_buf: dev.recv,
                    first_rec: b.first_rec,
                    n_rec: b.n_rec,
                },
                TraceOp::Kernel,
                (b.task_range.1 - b.task_range.0) as u64,
            );
            submit(
                DeviceOp::CopyFromDevice { buf: dev.recv, offset: recv_off, len: recv_len },
                TraceOp::D2h,
                recv_len as u64,
            );
            submit(DeviceOp::RecordEvent { event }, TraceOp::Event, 0);
        }

        // Unpack: wait per bundle in submission order, scatter, then release
        // the dependents of every packed task.
        let unpack_t0 = hooks.now_ns();
        let mut freed: Vec<TaskId> = Vec::with_capacity(buf.tasks.len());
        let mut recv_bytes = vec![0u8; buf.n_records * recv_size];
        for (event, _bundle_id, _stream, b) in &events {
            backend.wait_event(*event);
            let off = b.first_rec * recv_size;
            let len = b.n_rec * recv_size;
            backend.read_host(dev.recv, off, &mut recv_bytes[off..off + len]);
            for t in &buf.tasks[b.task_range.0..b.task_range.1] {
                let cells: Vec<u32> = t.sides.iter().map(|s| s.top_cell).collect();
                let guard = hooks.lock_cells(cells);
                // Safety: the scatter touches only the ranges of the cells
                // locked just above.
                let sys = unsafe { self.world.sys_unlocked() };
                match buf.loop_kind {
                    LoopKind::Density => {
                        let recs: Vec<RecvRecordDensity> = from_bytes(&recv_bytes);
                        for s in &t.sides {
                            scatter_density(sys, &recs, s.sys_first, s.count, s.rec_first);
                        }
                    }
                    LoopKind::Gradient => {
                        let recs: Vec<RecvRecordGradient> = from_bytes(&recv_bytes);
                        for s in &t.sides {
                            scatter_gradient(sys, &recs, s.sys_first, s.count, s.rec_first);
                        }
                    }
                    LoopKind::Force => {
                        let recs: Vec<RecvRecordForce> = from_bytes(&recv_bytes);
                        for s in &t.sides {
                            scatter_force(sys, &recs, s.sys_first, s.count, s.rec_first);
                        }
                    }
                }
                drop(guard);
                freed.push(t.task_id);
            }
        }
        hooks.complete_deferred(&freed);
        let unpack_t1 = hooks.now_ns();
        hooks.record_extra(
            worker,
            TaskKind::UnpackImplicit,
            Some(buf.loop_kind),
            Vec::new(),
            unpack_t0,
            unpack_t1,
        );

        {
            let mut agg = self.agg.lock().unwrap();
            let li = buffer_slot(buf.loop_kind, PackKind::SelfPack) / 2;
            agg.bytes_h2d[li] += (buf.n_records * send_size) as u64;
            agg.bytes_d2h[li] += (buf.n_records * recv_size) as u64;
            agg.particles_offloaded[li] += buf.n_records as u64;
            agg.unpack_count += 1;
        }
        buf.reset();
        Ok(())
    }
}

pub struct ExecWorkerState {
    scratch: Scratch,
    packs: Vec<PackBuffer>,
    flush_pending: bool,
}

impl<'a> Workload for StepWorkload<'a> {
    type WorkerState = ExecWorkerState;

    fn init_worker(&self, _worker: usize) -> ExecWorkerState {
        let packs = (0..6)
            .map(|slot| {
                let (l, k) = slot_kinds(slot);
                PackBuffer::new(l, k)
            })
            .collect();
        ExecWorkerState { scratch: Scratch::default(), packs, flush_pending: false }
    }

    fn execute(
        &self,
        task_id: TaskId,
        task: &Task,
        _worker: usize,
        ws: &mut ExecWorkerState,
        _hooks: &Hooks,
    ) -> Result<(), SolverError> {
        let meta = self.meta[task.payload as usize];
        let phys = &self.phys;
        // Safety: the scheduler holds this task's cell locks; each body only
        // touches the ranges and sort slots of those cells, except for
        // read-only neighbour access permitted by the stage dependencies.
        let sys = unsafe { self.world.sys_unlocked() };
        match meta {
            TaskMeta::Drift { top, top_index } => {
                let cell = &self.tree.cells[top as usize];
                let (first, count) = (cell.first, cell.count);
                if self.pre_kick_half > 0.0 {
                    let clamped = ghost::kick(sys, first, count, self.pre_kick_half, &phys.eos);
                    if clamped > 0 {
                        self.agg.lock().unwrap().clamped_u += clamped;
                    }
                }
                let moved = tree::drift_range(sys, first, count, self.dt);
                let drift = unsafe { self.world.drift_unlocked() };
                drift[top_index] += moved;
                let sorts = unsafe { self.world.sorts_unlocked() };
                for (cell_id, axis) in &self.dec.sort_lists[top_index] {
                    sorts.cells[*cell_id as usize].dirty[*axis] = true;
                }
                // New step: clear this range's interaction accumulators.
                sys.zero_accumulators_range(first, count);
                Ok(())
            }
            TaskMeta::Sort { top_index, .. } => {
                let sorts = unsafe { self.world.sorts_unlocked() };
                for (cell_id, axis) in &self.dec.sort_lists[top_index] {
                    let slot = &mut sorts.cells[*cell_id as usize];
                    if slot.dirty[*axis] || slot.lists[*axis].is_none() {
                        slot.lists[*axis] =
                            Some(self.tree.sort_cell_axis(sys, *cell_id, *axis));
                        slot.dirty[*axis] = false;
                    }
                }
                Ok(())
            }
            TaskMeta::LoopSelf { top_index, loop_kind, .. } => {
                let mut stats = UnitStats::default();
                for &ui in &self.dec.top_self_units[top_index] {
                    let cell = &self.tree.cells[self.dec.self_units[ui as usize] as usize];
                    let s = run_self_unit(
                        sys,
                        cell.first,
                        cell.count,
                        loop_kind,
                        &phys.loop_params,
                        &mut ws.scratch,
                    );
                    stats.degenerate += s.degenerate;
                }
                let sorts = unsafe { self.world.sorts_unlocked() };
                for &ui in &self.dec.top_internal_pairs[top_index] {
                    let s = run_pair_unit(
                        sys,
                        sorts,
                        self.tree,
                        &self.dec.pair_units[ui as usize],
                        loop_kind,
                        &phys.loop_params,
                        &mut ws.scratch,
                    )?;
                    stats.degenerate += s.degenerate;
                    stats.examined += s.examined;
                    stats.possible += s.possible;
                }
                let mut agg = self.agg.lock().unwrap();
                agg.degenerate += stats.degenerate;
                agg.pair_examined += stats.examined;
                agg.pair_possible += stats.possible;
                Ok(())
            }
            TaskMeta::LoopPair { cross_index, loop_kind } => {
                let sorts = unsafe { self.world.sorts_unlocked() };
                let mut stats = UnitStats::default();
                for &ui in &self.dec.top_cross_pairs[cross_index].2 {
                    let s = run_pair_unit(
                        sys,
                        sorts,
                        self.tree,
                        &self.dec.pair_units[ui as usize],
                        loop_kind,
                        &phys.loop_params,
                        &mut ws.scratch,
                    )?;
                    stats.degenerate += s.degenerate;
                    stats.examined += s.examined;
                    stats.possible += s.possible;
                }
                let mut agg = self.agg.lock().unwrap();
                agg.degenerate += stats.degenerate;
                agg.pair_examined += stats.examined;
                agg.pair_possible += stats.possible;
                Ok(())
            }
            TaskMeta::Ghost { top } => {
                let cell = &self.tree.cells[top as usize];
                let stats = ghost::ghost_density(
                    sys,
                    self.tree,
                    cell.first,
                    cell.count,
                    &phys.hsolve,
                    &phys.loop_params,
                    &phys.eos,
                    phys.eta,
                )?;
                self.agg.lock().unwrap().ghost.merge(&stats);
                Ok(())
            }
            TaskMeta::ExtraGhost { top } => {
                let cell = &self.tree.cells[top as usize];
                if self.init_step {
                    ghost::ghost_gradient_init(sys, cell.first, cell.count);
                    Ok(())
                } else {
                    ghost::ghost_gradient(
                        sys,
                        cell.first,
                        cell.count,
                        self.dt,
                        &phys.visc,
                        &phys.cond,
                        phys.loop_params.kernel.gamma_k,
                    )
                }
            }
            TaskMeta::Kick { top } => {
                let cell = &self.tree.cells[top as usize];
                let dt_half = 0.5 * self.dt;
                let clamped = ghost::kick(sys, cell.first, cell.count, dt_half, &phys.eos);
                if clamped > 0 {
                    self.agg.lock().unwrap().clamped_u += clamped;
                }
                Ok(())
            }
            TaskMeta::Timestep { top } => {
                let cell = &self.tree.cells[top as usize];
                let dt = ghost::timestep_partial(
                    sys,
                    cell.first,
                    cell.count,
                    phys.loop_params.kernel.gamma_k,
                    phys.c_cfl,
                )?;
                let mut agg = self.agg.lock().unwrap();
                agg.dt_min = agg.dt_min.min(dt);
                Ok(())
            }
            TaskMeta::PackSelf { unit, loop_kind } => {
                let cell_id = self.dec.self_units[unit];
                let cell = &self.tree.cells[cell_id as usize];
                let slot = buffer_slot(loop_kind, PackKind::SelfPack);
                let buf = &mut ws.packs[slot];
                let base = buf.n_records as i32;
                let n = cell.count;
                let sides = vec![PackSide {
                    top_cell: top_lock_index(self.tree, cell_id),
                    sys_first: cell.first,
                    count: n,
                    rec_first: 0,
                }];
                pack_records(sys, buf, task_id, sides, loop_kind, &mut ws.scratch, |s, out_base| {
                    (s, base + out_base, base + n as i32 - 1)
                });
                if buf.len() >= self.offload_cfg.pack_size(PackKind::SelfPack) {
                    ws.flush_pending = true;
                }
                Ok(())
            }
            TaskMeta::PackPair { unit, loop_kind } => {
                let pu = &self.dec.pair_units[unit];
                let ca = &self.tree.cells[pu.a as usize];
                let cb = &self.tree.cells[pu.b as usize];
                let slot = buffer_slot(loop_kind, PackKind::PairPack);
                let buf = &mut ws.packs[slot];
                let base = buf.n_records as i32;
                let (na, nb) = (ca.count as i32, cb.count as i32);
                let sides = vec![
                    PackSide {
                        top_cell: top_lock_index(self.tree, pu.a),
                        sys_first: ca.first,
                        count: ca.count,
                        rec_first: 0,
                    },
                    PackSide {
                        top_cell: top_lock_index(self.tree, pu.b),
                        sys_first: cb.first,
                        count: cb.count,
                        rec_first: 0,
                    },
                ];
                pack_pair_records(sys, buf, task_id, sides, loop_kind, &mut ws.scratch, base, na, nb);
                if buf.len() >= self.offload_cfg.pack_size(PackKind::PairPack) {
                    ws.flush_pending = true;
                }
                Ok(())
            }
        }
    }

    fn after_release(
        &self,
        worker: usize,
        ws: &mut ExecWorkerState,
        hooks: &Hooks,
    ) -> Result<(), SolverError> {
        if !ws.flush_pending {
            return Ok(());
        }
        ws.flush_pending = false;
        for slot in 0..6 {
            let (_, kind) = slot_kinds(slot);
            if ws.packs[slot].len() >= self.offload_cfg.pack_size(kind) {
                let mut buf = std::mem::replace(
                    &mut ws.packs[slot],
                    PackBuffer::new(slot_kinds(slot).0, kind),
                );
                self.flush_buffer(worker, &mut buf, hooks)?;
                ws.packs[slot] = buf;
            }
        }
        Ok(())
    }

    fn on_starved(
        &self,
        worker: usize,
        ws: &mut ExecWorkerState,
        hooks: &Hooks,
    ) -> Result<bool, SolverError> {
        let mut progressed = false;
        for slot in 0..6 {
            if !ws.packs[slot].is_empty() {
                let (l, k) = slot_kinds(slot);
                let mut buf = std::mem::replace(&mut ws.packs[slot], PackBuffer::new(l, k));
                self.flush_buffer(worker, &mut buf, hooks)?;
                ws.packs[slot] = buf;
                progressed = true;
            }
        }
        Ok(progressed)
    }
}

/// Encode and append a self task's records for any loop kind.
fn pack_records<F>(
    sys: &ParticleSystem,
    buf: &mut PackBuffer,
    task_id: TaskId,
    sides: Vec<PackSide>,
    loop_kind: LoopKind,
    scratch: &mut Scratch,
    _range: F,
) where
    F: Fn(usize, i32) -> (usize, i32, i32),
{
    let s = &sides[0];
    let base = buf.n_records as i32;
    let (cf, cl) = (base, base + s.count as i32 - 1);
    match loop_kind {
        LoopKind::Density => {
            scratch.send_d.clear();
            encode_density(sys, s.sys_first, s.count, cf, cl, &mut scratch.send_d);
            buf.push_task(task_id, sides, &scratch.send_d);
        }
        LoopKind::Gradient => {
            scratch.send_g.clear();
            encode_gradient(sys, s.sys_first, s.count, cf, cl, &mut scratch.send_g);
            buf.push_task(task_id, sides, &scratch.send_g);
        }
        LoopKind::Force => {
            scratch.send_f.clear();
            encode_force(sys, s.sys_first, s.count, cf, cl, &mut scratch.send_f);
            buf.push_task(task_id, sides, &scratch.send_f);
        }
    }
}

/// Encode and append a pair task's records: each side's records carry the
/// other side's record range.
fn pack_pair_records(
    sys: &ParticleSystem,
    buf: &mut PackBuffer,
    task_id: TaskId,
    sides: Vec<PackSide>,
    loop_kind: LoopKind,
    scratch: &mut Scratch,
    base: i32,
    na: i32,
    nb: i32,
) {
    let (a, b) = (&sides[0], &sides[1]);
    match loop_kind {
        LoopKind::Density => {
            scratch.send_d.clear();
            encode_density(sys, a.sys_first, a.count, base + na, base + na + nb - 1, &mut scratch.send_d);
            encode_density(sys, b.sys_first, b.count, base, base + na - 1, &mut scratch.send_d);
            buf.push_task(task_id, sides, &scratch.send_d);
        }
        LoopKind::Gradient => {
            scratch.send_g.clear();
            encode_gradient(sys, a.sys_first, a.count, base + na, base + na + nb - 1, &mut scratch.send_g);
            encode_gradient(sys, b.sys_first, b.count, base, base + na - 1, &mut scratch.send_g);
            buf.push_task(task_id, sides, &scratch.send_g);
        }
        LoopKind::Force => {
            scratch.send_f.clear();
            encode_force(sys, a.sys_first, a.count, base + na, base + na + nb - 1, &mut scratch.send_f);
            encode_force(sys, b.sys_first, b.count, base, base + na - 1, &mut scratch.send_f);
            buf.push_task(task_id, sides, &scratch.send_f);
        }
    }
}

/// Run one step graph to completion and return (timeline, aggregates).
pub fn run_step(
    workload: &StepWorkload,
    step_graph: &StepGraph,
    workers: usize,
) -> Result<(engine::Timeline, StepAggregates), SolverError> {
    run_step_with(workload, step_graph, engine::RunOptions::new(workers))
}

pub fn run_step_with(
    workload: &StepWorkload,
    step_graph: &StepGraph,
    opts: engine::RunOptions,
) -> Result<(engine::Timeline, StepAggregates), SolverError> {
    let timeline = engine::run(&step_graph.graph, workload, opts)?;
    let agg = workload.take_aggregates();
    Ok((timeline, agg))
}
