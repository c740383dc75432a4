//! Dependency-driven, lock-protected, work-stealing task scheduler.
//!
//! Tasks carry a wait counter (unfulfilled predecessor count), a set of cell
//! locks they must hold exclusively while executing, and a list of dependent
//! tasks unlocked on completion. Workers pop from their own FIFO queue and
//! steal from the longest other queue when starved. Completion normally
//! decrements the dependents' wait counters; tasks flagged as
//! deferred-unlock (pack tasks) leave that to a later explicit call, which
//! is how the offload pipeline gates dependents on device results.

use crate::error::SolverError;
use crate::loops::LoopKind;
use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Instant;

pub type TaskId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    SelfTask,
    PairTask,
    SubSelf,
    SubPair,
    Sort,
    Ghost,
    ExtraGhost,
    Kick,
    Drift,
    Timestep,
    Pack,
    UnpackImplicit,
}

impl TaskKind {
    pub fn label(&self) -> &'static str {
        match self {
            TaskKind::SelfTask => "self",
            TaskKind::PairTask => "pair",
            TaskKind::SubSelf => "sub_self",
            TaskKind::SubPair => "sub_pair",
            TaskKind::Sort => "sort",
            TaskKind::Ghost => "ghost",
            TaskKind::ExtraGhost => "extra_ghost",
            TaskKind::Kick => "kick",
            TaskKind::Drift => "drift",
            TaskKind::Timestep => "timestep",
            TaskKind::Pack => "pack",
            TaskKind::UnpackImplicit => "unpack_implicit",
        }
    }
}

pub fn subtype_label(subtype: Option<LoopKind>) -> &'static str {
    match subtype {
        None => "none",
        Some(l) => l.label(),
    }
}

#[derive(Debug)]
pub struct Task {
    pub kind: TaskKind,
    pub subtype: Option<LoopKind>,
    /// Target cell id(s), for reporting.
    pub cells: Vec<u32>,
    /// Lock ids this task holds exclusively while executing (ascending).
    pub locks: Vec<u32>,
    /// Opaque workload-side index.
    pub payload: u32,
    /// Pack tasks defer unlocking their dependents to the unpack phase.
    pub deferred_unlock: bool,
    pub dependents: Vec<TaskId>,
    wait_init: u32,
}

#[derive(Debug, Default)]
pub struct TaskGraph {
    pub tasks: Vec<Task>,
    pub n_locks: usize,
}

impl TaskGraph {
    pub fn new(n_locks: usize) -> Self {
        TaskGraph { tasks: Vec::new(), n_locks }
    }

    pub fn add_task(
        &mut self,
        kind: TaskKind,
        subtype: Option<LoopKind>,
        cells: Vec<u32>,
        mut locks: Vec<u32>,
        payload: u32,
    ) -> TaskId {
        locks.sort_unstable();
        locks.dedup();
        debug_assert!(locks.iter().all(|&l| (l as usize) < self.n_locks));
        let id = self.tasks.len() as TaskId;
        self.tasks.push(Task {
            kind,
            subtype,
            cells,
            locks,
            payload,
            deferred_unlock: false,
            dependents: Vec::new(),
            wait_init: 0,
        });
        id
    }

    pub fn set_deferred_unlock(&mut self, id: TaskId) {
        self.tasks[id as usize].deferred_unlock = true;
    }

    /// Add a dependency edge: `to` waits for `from`.
    pub fn add_edge(&mut self, from: TaskId, to: TaskId) {
        self.tasks[from as usize].dependents.push(to);
        self.tasks[to as usize].wait_init += 1;
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Kahn's algorithm; on failure, return a witness cycle found by DFS.
    pub fn validate_acyclic(&self) -> Result<(), SolverError> {
        let n = self.tasks.len();
        let mut wait: Vec<u32> = self.tasks.iter().map(|t| t.wait_init).collect();
        let mut queue: VecDeque<usize> =
            (0..n).filter(|&i| wait[i] == 0).collect();
        let mut seen = 0usize;
        while let Some(i) = queue.pop_front() {
            seen += 1;
            for &d in &self.tasks[i].dependents {
                wait[d as usize] -= 1;
                if wait[d as usize] == 0 {
                    queue.push_back(d as usize);
                }
            }
        }
        if seen == n {
            return Ok(());
        }
        // Find a witness cycle among the remaining tasks.
        let in_cycle: Vec<usize> = (0..n).filter(|&i| wait[i] > 0).collect();
        let witness = self.find_cycle(&in_cycle).unwrap_or_default();
        Err(SolverError::Internal(format!(
            "task graph contains a cycle: {:?}",
            witness
        )))
    }

    fn find_cycle(&self, nodes: &[usize]) -> Option<Vec<TaskId>> {
        let node_set: std::collections::HashSet<usize> = nodes.iter().copied().collect();
        let mut stack = Vec::new();
        let mut on_stack = vec![false; self.tasks.len()];
        let mut visited = vec![false; self.tasks.len()];
        for &start in nodes {
            if visited[start] {
                continue;
            }
            if let Some(c) = self.dfs_cycle(start, &node_set, &mut stack, &mut on_stack, &mut visited)
            {
                return Some(c);
            }
        }
        None
    }

    fn dfs_cycle(
        &self,
        v: usize,
        nodes: &std::collections::HashSet<usize>,
        stack: &mut Vec<usize>,
        on_stack: &mut [bool],
        visited: &mut [bool],
    ) -> Option<Vec<TaskId>> {
        visited[v] = true;
        on_stack[v] = true;
        stack.push(v);
        for &d in &self.tasks[v].dependents {
            let d = d as usize;
            if !nodes.contains(&d) {
                continue;
            }
            if on_stack[d] {
                let pos = stack.iter().position(|&s| s == d).unwrap();
                return Some(stack[pos..].iter().map(|&s| s as TaskId).collect());
            }
            if !visited[d] {
                if let Some(c) = self.dfs_cycle(d, nodes, stack, on_stack, visited) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        on_stack[v] = false;
        None
    }
}

#[derive(Debug, Clone)]
pub struct TimelineRecord {
    pub task: TaskId,
    pub worker: u32,
    pub kind: TaskKind,
    pub subtype: Option<LoopKind>,
    pub cells: Vec<u32>,
    pub t_start_ns: u64,
    pub t_end_ns: u64,
}

#[derive(Debug, Default)]
pub struct Timeline {
    pub records: Vec<TimelineRecord>,
    pub wall_ns: u64,
    pub worker_busy_ns: Vec<u64>,
    pub workers: usize,
}

impl Timeline {
    /// Per-run time the workers spent not executing tasks, summed over
    /// workers.
    pub fn outside_task_ns(&self) -> u64 {
        self.worker_busy_ns
            .iter()
            .map(|&b| self.wall_ns.saturating_sub(b))
            .sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "worker,task_type,subtype,cell_ids,t_start_ns,t_end_ns")?;
        for r in &self.records {
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
                subtype_label(r.subtype),
                cells,
                r.t_start_ns,
                r.t_end_ns
            )?;
        }
        Ok(())
    }
}

/// Task bodies, provided by the physics layer (or by test harnesses).
pub trait Workload: Sync {
    type WorkerState: Send;

    fn init_worker(&self, worker: usize) -> Self::WorkerState;

    /// Run one task. Tasks flagged `deferred_unlock` do not propagate their
    /// dependents on completion; the workload must later hand their ids to
    /// [`Hooks::complete_deferred`].
    fn execute(
        &self,
        task_id: TaskId,
        task: &Task,
        worker: usize,
        ws: &mut Self::WorkerState,
        hooks: &Hooks,
    ) -> Result<(), SolverError>;

    /// Called after the task's locks have been released; flush points live
    /// here so a full pack buffer is never drained while holding task locks.
    fn after_release(
        &self,
        _worker: usize,
        _ws: &mut Self::WorkerState,
        _hooks: &Hooks,
    ) -> Result<(), SolverError> {
        Ok(())
    }

    /// Called when a worker finds no runnable task anywhere. Return true if
    /// progress was made (e.g. a partial buffer was flushed).
    fn on_starved(
        &self,
        _worker: usize,
        _ws: &mut Self::WorkerState,
        _hooks: &Hooks,
    ) -> Result<bool, SolverError> {
        Ok(false)
    }
}

struct ParkMonitor {
    lock: Mutex<()>,
    cv: Condvar,
    parked: AtomicUsize,
}

/// Scheduler internals shared with the workload during a run.
pub struct Hooks<'g> {
    graph: &'g TaskGraph,
    waits: Vec<AtomicU32>,
    executed: Vec<AtomicBool>,
    queues: Vec<Mutex<VecDeque<TaskId>>>,
    locks: Vec<AtomicBool>,
    pending: AtomicUsize,
    rr: AtomicUsize,
    park: ParkMonitor,
    timelines: Vec<Mutex<Vec<TimelineRecord>>>,
    start: Instant,
    abort: Mutex<Option<SolverError>>,
    abort_flag: AtomicBool,
    workers: usize,
}

impl<'g> Hooks<'g> {
    pub fn now_ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    fn enqueue(&self, id: TaskId) {
        let w = self.rr.fetch_add(1, Ordering::Relaxed) % self.workers;
        self.queues[w].lock().unwrap().push_back(id);
        if self.park.parked.load(Ordering::Acquire) > 0 {
            let _g = self.park.lock.lock().unwrap();
            self.park.cv.notify_all();
        }
    }

    fn propagate(&self, id: TaskId) {
        for &d in &self.graph.tasks[id as usize].dependents {
            if self.waits[d as usize].fetch_sub(1, Ordering::AcqRel) == 1 {
                self.enqueue(d);
            }
        }
    }

    /// Unlock the dependents of tasks whose completion was deferred (the
    /// offload unpack path).
    pub fn complete_deferred(&self, ids: &[TaskId]) {
        for &id in ids {
            debug_assert!(self.graph.tasks[id as usize].deferred_unlock);
            self.propagate(id);
        }
    }

    /// Blocking exclusive acquisition of a set of cell locks in canonical
    /// order; used for scatter writes outside task execution.
    pub fn lock_cells(&self, mut cells: Vec<u32>) -> CellLockGuard<'_, 'g> {
        cells.sort_unstable();
        cells.dedup();
        loop {
            if self.try_lock(&cells) {
                return CellLockGuard { hooks: self, cells };
            }
            std::thread::yield_now();
        }
    }

    fn try_lock(&self, locks: &[u32]) -> bool {
        for (k, &l) in locks.iter().enumerate() {
            if self.locks[l as usize]
                .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
                .is_err()
            {
                for &r in &locks[..k] {
                    self.locks[r as usize].store(false, Ordering::Release);
                }
                return false;
            }
        }
        true
    }

    fn unlock(&self, locks: &[u32]) {
        for &l in locks {
            self.locks[l as usize].store(false, Ordering::Release);
        }
    }

    /// Record a synthetic timeline row (e.g. the implicit unpack work).
    pub fn record_extra(
        &self,
        worker: usize,
        kind: TaskKind,
        subtype: Option<LoopKind>,
        cells: Vec<u32>,
        t_start_ns: u64,
        t_end_ns: u64,
    ) {
        self.timelines[worker].lock().unwrap().push(TimelineRecord {
            task: u32::MAX,
            worker: worker as u32,
            kind,
            subtype,
            cells,
            t_start_ns,
            t_end_ns,
        });
    }

    fn set_abort(&self, err: SolverError) {
        let mut slot = self.abort.lock().unwrap();
        if slot.is_none() {
            *slot = Some(err);
        }
        self.abort_flag.store(true, Ordering::Release);
        let _g = self.park.lock.lock().unwrap();
        self.park.cv.notify_all();
    }
}

pub struct CellLockGuard<'a, 'g> {
    hooks: &'a Hooks<'g>,
    cells: Vec<u32>,
}

impl Drop for CellLockGuard<'_, '_> {
    fn drop(&mut self) {
        self.hooks.unlock(&self.cells);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub workers: usize,
    /// Seed every initially-runnable task to worker 0 (stress-testing the
    /// steal path) instead of round-robin.
    pub seed_first: bool,
    /// Starting offset of the round-robin queue assignment.
    pub rr_seed: u64,
}

impl RunOptions {
    pub fn new(workers: usize) -> Self {
        RunOptions { workers, seed_first: false, rr_seed: 0 }
    }

    pub fn with_rr_seed(mut self, seed: u64) -> Self {
        self.rr_seed = seed;
        self
    }
}

/// Victim selection for stealing: the longest queue, ties broken by the
/// lowest worker id; never the caller's own queue, never an empty one.
pub fn pick_victim(lens: &[usize], own: usize) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (w, &len) in lens.iter().enumerate() {
        if w == own || len == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, blen)) => len > blen,
        };
        if better {
            best = Some((w, len));
        }
    }
    best.map(|(w, _)| w)
}

/// Execute a task graph to completion. All tasks run exactly once, dependency
/// order and lock exclusivity are honoured, and per-task execution records
/// are returned.
pub fn run<W: Workload>(
    graph: &TaskGraph,
    workload: &W,
    opts: RunOptions,
) -> Result<Timeline, SolverError> {
    graph.validate_acyclic()?;
    let workers = opts.workers.max(1);

    let hooks = Hooks {
        graph,
        waits: graph.tasks.iter().map(|t| AtomicU32::new(t.wait_init)).collect(),
        executed: (0..graph.tasks.len()).map(|_| AtomicBool::new(false)).collect(),
        queues: (0..workers).map(|_| Mutex::new(VecDeque::new())).collect(),
        locks: (0..graph.n_locks).map(|_| AtomicBool::new(false)).collect(),
        pending: AtomicUsize::new(graph.tasks.len()),
        rr: AtomicUsize::new(opts.rr_seed as usize % workers),
        park: ParkMonitor { lock: Mutex::new(()), cv: Condvar::new(), parked: AtomicUsize::new(0) },
        timelines: (0..workers).map(|_| Mutex::new(Vec::new())).collect(),
        start: Instant::now(),
        abort: Mutex::new(None),
        abort_flag: AtomicBool::new(false),
        workers,
    };

    for (i, t) in graph.tasks.iter().enumerate() {
        if t.wait_init == 0 {
            if opts.seed_first {
                hooks.queues[0].lock().unwrap().push_back(i as TaskId);
            } else {
                hooks.enqueue(i as TaskId);
            }
        }
    }

    std::thread::scope(|scope| {
        for w in 0..workers {
            let hooks = &hooks;
            scope.spawn(move || worker_loop(w, hooks, workload));
        }
    });

    if let Some(err) = hooks.abort.lock().unwrap().take() {
        return Err(err);
    }
    if hooks.pending.load(Ordering::Acquire) != 0 {
        return Err(SolverError::Internal(
            "scheduler exited with pending tasks and no recorded error".into(),
        ));
    }

    let wall_ns = hooks.now_ns();
    let mut records = Vec::with_capacity(graph.tasks.len());
    let mut worker_busy_ns = vec![0u64; workers];
    for (w, tl) in hooks.timelines.iter().enumerate() {
        let recs = tl.lock().unwrap();
        worker_busy_ns[w] = recs.iter().map(|r| r.t_end_ns - r.t_start_ns).sum();
        records.extend(recs.iter().cloned());
    }
    records.sort_by_key(|r| (r.t_start_ns, r.worker));
    Ok(Timeline { records, wall_ns, worker_busy_ns, workers })
}

fn worker_loop<W: Workload>(worker: usize, hooks: &Hooks, workload: &W) {
    let mut ws = workload.init_worker(worker);
    loop {
        if hooks.abort_flag.load(Ordering::Acquire)
            || hooks.pending.load(Ordering::Acquire) == 0
        {
            return;
        }

        let task_id = pop_own(hooks, worker).or_else(|| steal(hooks, worker));
        let Some(tid) = task_id else {
            // Starved: give the workload a chance to flush partial state.
            match workload.on_starved(worker, &mut ws, hooks) {
                Ok(true) => continue,
                Ok(false) => {}
                Err(e) => {
                    hooks.set_abort(e);
                    return;
                }
            }
            park(hooks, worker);
            continue;
        };

        let task = &hooks.graph.tasks[tid as usize];
        if !hooks.try_lock(&task.locks) {
            hooks.queues[worker].lock().unwrap().push_back(tid);
            std::thread::yield_now();
            continue;
        }

        if hooks.executed[tid as usize].swap(true, Ordering::AcqRel) {
            hooks.unlock(&task.locks);
            hooks.set_abort(SolverError::Internal(format!(
                "task {tid} dispatched twice"
            )));
            return;
        }

        let t0 = hooks.now_ns();
        let result = workload.execute(tid, task, worker, &mut ws, hooks);
        let t1 = hooks.now_ns();
        hooks.unlock(&task.locks);
        hooks.timelines[worker].lock().unwrap().push(TimelineRecord {
            task: tid,
            worker: worker as u32,
            kind: task.kind,
            subtype: task.subtype,
            cells: task.cells.clone(),
            t_start_ns: t0,
            t_end_ns: t1,
        });

        match result {
            Ok(()) => {
                if !task.deferred_unlock {
                    hooks.propagate(tid);
                }
                if hooks.pending.fetch_sub(1, Ordering::AcqRel) == 1 {
                    let _g = hooks.park.lock.lock().unwrap();
                    hooks.park.cv.notify_all();
                }
            }
            Err(e) => {
                hooks.set_abort(e);
                return;
            }
        }

        if let Err(e) = workload.after_release(worker, &mut ws, hooks) {
            hooks.set_abort(e);
            return;
        }
    }
}

fn pop_own(hooks: &Hooks, worker: usize) -> Option<TaskId> {
    hooks.queues[worker].lock().unwrap().pop_front()
}

fn steal(hooks: &Hooks, worker: usize) -> Option<TaskId> {
    let lens: Vec<usize> = hooks
        .queues
        .iter()
        .map(|q| q.lock().unwrap().len())
        .collect();
    let victim = pick_victim(&lens, worker)?;
    hooks.queues[victim].lock().unwrap().pop_front()
}

fn park(hooks: &Hooks, _worker: usize) {
    let guard = hooks.park.lock.lock().unwrap();
    let parked = hooks.park.parked.fetch_add(1, Ordering::AcqRel) + 1;
    if parked == hooks.workers && hooks.pending.load(Ordering::Acquire) > 0 {
        // Everyone is starved with nothing left to flush: dependency deadlock.
        let blocked: Vec<String> = hooks
            .graph
            .tasks
            .iter()
            .enumerate()
            .filter(|(i, _)| !hooks.executed[*i].load(Ordering::Acquire))
            .take(32)
            .map(|(i, t)| {
                format!(
                    "task {} {}/{} waits={}",
                    i,
                    t.kind.label(),
                    subtype_label(t.subtype),
                    hooks.waits[i].load(Ordering::Acquire)
                )
            })
            .collect();
        hooks.park.parked.fetch_sub(1, Ordering::AcqRel);
        drop(guard);
        hooks.set_abort(SolverError::Internal(format!(
            "scheduler deadlock: no runnable task with {} pending; blocked: [{}]",
            hooks.pending.load(Ordering::Acquire),
            blocked.join("; ")
        )));
        return;
    }
    let _unused = hooks
        .park
        .cv
        .wait_timeout(guard, std::time::Duration::from_millis(20))
        .unwrap();
    hooks.park.parked.fetch_sub(1, Ordering::AcqRel);
}
