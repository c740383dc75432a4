//! Trace-driven discrete-event simulator of an accelerator: copy engines,
//! link bandwidth, kernel slots and stream-ordered scheduling, producing
//! schedules and overlap metrics from an offload trace.

use crate::error::SolverError;
use crate::loops::LoopKind;
use crate::offload::{OffloadConfig, PackKind, TraceOp, TraceRow};
use std::collections::BinaryHeap;
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy)]
pub struct DeviceModel {
    /// Host-to-device and device-to-host link bandwidths, bytes/s, full
    /// duplex.
    pub h2d_bandwidth: f64,
    pub d2h_bandwidth: f64,
    pub h2d_engines: usize,
    pub d2h_engines: usize,
    /// Concurrent kernel slots; one means kernels saturate the device.
    pub kernel_slots: usize,
    pub launch_overhead: f64,
    pub per_interaction: f64,
    pub per_particle: f64,
    pub link_latency: f64,
}

impl DeviceModel {
    pub fn nvlink_like() -> Self {
        DeviceModel {
            h2d_bandwidth: 50e9,
            d2h_bandwidth: 50e9,
            h2d_engines: 1,
            d2h_engines: 1,
            kernel_slots: 1,
            launch_overhead: 1e-6,
            per_interaction: 2e-10,
            per_particle: 1e-9,
            link_latency: 1e-6,
        }
    }

    pub fn pcie4_like() -> Self {
        DeviceModel {
            h2d_bandwidth: 32e9,
            d2h_bandwidth: 32e9,
            link_latency: 2.5e-6,
            ..Self::nvlink_like()
        }
    }

    /// Parse a key = value model file; unknown keys are rejected.
    pub fn from_file(path: &std::path::Path) -> Result<Self, SolverError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SolverError::Config(format!("cannot read device model {}: {e}", path.display()))
        })?;
        let mut m = Self::nvlink_like();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SolverError::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            let v: f64 = value.trim().parse().map_err(|_| {
                SolverError::Config(format!("{}:{}: malformed number", path.display(), lineno + 1))
            })?;
            match key.trim() {
                "h2d_bandwidth" => m.h2d_bandwidth = v,
                "d2h_bandwidth" => m.d2h_bandwidth = v,
                "h2d_engines" => m.h2d_engines = v as usize,
                "d2h_engines" => m.d2h_engines = v as usize,
                "kernel_slots" => m.kernel_slots = v as usize,
                "launch_overhead" => m.launch_overhead = v,
                "per_interaction" => m.per_interaction = v,
                "per_particle" => m.per_particle = v,
                "link_latency" => m.link_latency = v,
                other => {
                    return Err(SolverError::Config(format!(
                        "{}:{}: unknown device model key '{other}'",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        Ok(m)
    }

    fn duration(&self, row: &TraceRow) -> f64 {
        match row.op {
            TraceOp::H2d => self.link_latency + row.bytes_or_tasks as f64 / self.h2d_bandwidth,
            TraceOp::D2h => self.link_latency + row.bytes_or_tasks as f64 / self.d2h_bandwidth,
            TraceOp::Kernel => {
                self.launch_overhead
                    + self.per_particle * row.particles as f64
                    + self.per_interaction * row.interactions as f64
            }
            TraceOp::Event => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resource {
    H2dEngine,
    D2hEngine,
    KernelSlot,
    None,
}

impl Resource {
    pub fn label(&self) -> &'static str {
        match self {
            Resource::H2dEngine => "h2d_engine",
            Resource::D2hEngine => "d2h_engine",
            Resource::KernelSlot => "kernel_slot",
            Resource::None => "none",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOp {
    pub index: usize,
    pub stream: u32,
    pub op: TraceOp,
    pub loop_kind: LoopKind,
    pub bundle: u64,
    pub t_start: f64,
    pub t_end: f64,
    pub resource: Resource,
}

#[derive(Debug, Clone, Default)]
pub struct SimTimeline {
    pub ops: Vec<SimOp>,
    pub makespan: f64,
    pub busy_h2d: f64,
    pub busy_d2h: f64,
    pub busy_kernel: f64,
    pub overlap_fraction: f64,
}

impl SimTimeline {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "op,stream,loop,bundle_id,t_start,t_end,resource")?;
        for o in &self.ops {
            writeln!(
                out,
                "{},{},{},{},{:.9},{:.9},{}",
                o.op.label(),
                o.stream,
                o.loop_kind.label(),
                o.bundle,
                o.t_start,
                o.t_end,
                o.resource.label()
            )?;
        }
        Ok(())
    }

    pub fn write_metrics<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "makespan={:.9}", self.makespan)?;
        writeln!(out, "overlap_fraction={:.6}", self.overlap_fraction)?;
        writeln!(out, "busy_h2d={:.9}", self.busy_h2d)?;
        writeln!(out, "busy_d2h={:.9}", self.busy_d2h)?;
        writeln!(out, "busy_kernel={:.9}", self.busy_kernel)?;
        Ok(())
    }
}

/// Deterministic earliest-start schedule of a trace under the model:
/// per-stream FIFO, engine capacities, durations from the cost model, ops
/// never starting before their submission instant, ties broken by submission
/// order.
pub fn simulate(rows: &[TraceRow], model: &DeviceModel) -> Result<SimTimeline, SolverError> {
    // Submission instants must be monotone per worker.
    let mut last_submit: std::collections::HashMap<u32, f64> = Default::default();
    for (i, r) in rows.iter().enumerate() {
        if let Some(&prev) = last_submit.get(&r.worker) {
            if r.t_submit < prev {
                return Err(SolverError::Config(format!(
                    "line {}: non-monotone submission times for worker {}",
                    i + 2,
                    r.worker
                )));
            }
        }
        last_submit.insert(r.worker, r.t_submit);
    }

    // Per-stream chains in submission order.
    let mut stream_ops: std::collections::HashMap<u32, Vec<usize>> = Default::default();
    for (i, r) in rows.iter().enumerate() {
        stream_ops.entry(r.stream).or_default().push(i);
    }
    let mut succ: Vec<Option<usize>> = vec![None; rows.len()];
    let mut first_in_stream: Vec<bool> = vec![false; rows.len()];
    for ops in stream_ops.values() {
        first_in_stream[ops[0]] = true;
        for w in ops.windows(2) {
            succ[w[0]] = Some(w[1]);
        }
    }

    #[derive(PartialEq)]
    struct Ev {
        time: f64,
        seq: u64,
        kind: EvKind,
    }
    #[derive(PartialEq, Eq)]
    enum EvKind {
        Ready(usize),
        Finish(usize, Resource),
    }
    impl Eq for Ev {}
    impl Ord for Ev {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            // Reversed for the max-heap.
            other
                .time
                .total_cmp(&self.time)
                .then_with(|| other.seq.cmp(&self.seq))
        }
    }
    impl PartialOrd for Ev {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    let resource_of = |op: TraceOp| match op {
        TraceOp::H2d => Resource::H2dEngine,
        TraceOp::D2h => Resource::D2hEngine,
        TraceOp::Kernel => Resource::KernelSlot,
        TraceOp::Event => Resource::None,
    };
    let capacity = |r: Resource| match r {
        Resource::H2dEngine => model.h2d_engines.max(1),
        Resource::D2hEngine => model.d2h_engines.max(1),
        Resource::KernelSlot => model.kernel_slots.max(1),
        Resource::None => usize::MAX,
    };

    let mut heap: BinaryHeap<Ev> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<Ev>, time: f64, kind: EvKind| {
        heap.push(Ev { time, seq, kind });
        seq += 1;
    };

    for (i, r) in rows.iter().enumerate() {
        if first_in_stream[i] {
            push(&mut heap, r.t_submit, EvKind::Ready(i));
        }
    }

    // Pending ops per resource, ordered by (ready time, submission index).
    let mut pending: [BTreeSet<(u64, usize)>; 3] = Default::default();
    let pend_idx = |r: Resource| match r {
        Resource::H2dEngine => 0usize,
        Resource::D2hEngine => 1,
        Resource::KernelSlot => 2,
        Resource::None => unreachable!(),
    };
    let mut in_use = [0usize; 3];
    let mut result: Vec<Option<SimOp>> = (0..rows.len()).map(|_| None).collect();
    let key_of = |time: f64, idx: usize| (time.to_bits(), idx);

    while let Some(ev) = heap.pop() {
        let now = ev.time;
        match ev.kind {
            EvKind::Ready(i) => {
                let r = &rows[i];
                let res = resource_of(r.op);
                if res == Resource::None {
                    // Events complete with their stream predecessor.
                    result[i] = Some(SimOp {
                        index: i,
                        stream: r.stream,
                        op: r.op,
                        loop_kind: r.loop_kind,
                        bundle: r.bundle,
                        t_start: now,
                        t_end: now,
                        resource: res,
                    });
                    if let Some(s) = succ[i] {
                        push(&mut heap, now.max(rows[s].t_submit), EvKind::Ready(s));
                    }
                } else {
                    pending[pend_idx(res)].insert(key_of(now, i));
                    // Dispatch if a slot is free.
                    let p = pend_idx(res);
                    while in_use[p] < capacity(res) && !pending[p].is_empty() {
                        let key = *pending[p].iter().next().unwrap();
                        pending[p].remove(&key);
                        let (_, op_i) = key;
                        let dur = model.duration(&rows[op_i]);
                        in_use[p] += 1;
                        result[op_i] = Some(SimOp {
                            index: op_i,
                            stream: rows[op_i].stream,
                            op: rows[op_i].op,
                            loop_kind: rows[op_i].loop_kind,
                            bundle: rows[op_i].bundle,
                            t_start: now,
                            t_end: now + dur,
                            resource: res,
                        });
                        push(&mut heap, now + dur, EvKind::Finish(op_i, res));
                    }
                }
            }
            EvKind::Finish(i, res) => {
                let p = pend_idx(res);
                in_use[p] -= 1;
                if let Some(s) = succ[i] {
                    push(&mut heap, now.max(rows[s].t_submit), EvKind::Ready(s));
                }
                while in_use[p] < capacity(res) && !pending[p].is_empty() {
                    let key = *pending[p].iter().next().unwrap();
                    pending[p].remove(&key);
                    let (_, op_i) = key;
                    let dur = model.duration(&rows[op_i]);
                    in_use[p] += 1;
                    result[op_i] = Some(SimOp {
                        index: op_i,
                        stream: rows[op_i].stream,
                        op: rows[op_i].op,
                        loop_kind: rows[op_i].loop_kind,
                        bundle: rows[op_i].bundle,
                        t_start: now,
                        t_end: now + dur,
                        resource: res,
                    });
                    push(&mut heap, now + dur, EvKind::Finish(op_i, res));
                }
            }
        }
    }

    let mut ops: Vec<SimOp> = result
        .into_iter()
        .enumerate()
        .map(|(i, o)| {
            o.ok_or_else(|| SolverError::Internal(format!("op {i} was never scheduled")))
        })
        .collect::<Result<_, _>>()?;
    ops.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.index.cmp(&b.index)));

    let makespan = ops.iter().map(|o| o.t_end).fold(0.0, f64::max);
    let union = |kinds: &[TraceOp]| -> f64 {
        let mut iv: Vec<(f64, f64)> = ops
            .iter()
            .filter(|o| kinds.contains(&o.op))
            .map(|o| (o.t_start, o.t_end))
            .collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        merged_length(&iv)
    };
    let busy_h2d = union(&[TraceOp::H2d]);
    let busy_d2h = union(&[TraceOp::D2h]);
    let busy_kernel = union(&[TraceOp::Kernel]);
    let mut tl = SimTimeline {
        ops,
        makespan,
        busy_h2d,
        busy_d2h,
        busy_kernel,
        overlap_fraction: 0.0,
    };
    tl.overlap_fraction = overlap_fraction(&tl);
    Ok(tl)
}

fn merged_length(sorted: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for &(s, e) in sorted {
        match cur {
            None => cur = Some((s, e)),
            Some((cs, ce)) => {
                if s <= ce {
                    cur = Some((cs, ce.max(e)));
                } else {
                    total += ce - cs;
                    cur = Some((s, e));
                }
            }
        }
    }
    if let Some((cs, ce)) = cur {
        total += ce - cs;
    }
    total
}

fn merged_intervals(sorted: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for &(s, e) in sorted {
        if let Some(last) = out.last_mut() {
            if s <= last.1 {
                last.1 = last.1.max(e);
                continue;
            }
        }
        out.push((s, e));
    }
    out
}

/// Fraction of kernel-busy time during which at least one copy engine is also
/// busy; zero when either set is empty.
pub fn overlap_fraction(tl: &SimTimeline) -> f64 {
    let collect = |pred: fn(&SimOp) -> bool| -> Vec<(f64, f64)> {
        let mut iv: Vec<(f64, f64)> = tl
            .ops
            .iter()
            .filter(|o| pred(o) && o.t_end > o.t_start)
            .map(|o| (o.t_start, o.t_end))
            .collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        merged_intervals(&iv)
    };
    let kernels = collect(|o| o.op == TraceOp::Kernel);
    let copies = collect(|o| matches!(o.op, TraceOp::H2d | TraceOp::D2h));
    let kernel_total: f64 = kernels.iter().map(|(s, e)| e - s).sum();
    if kernel_total == 0.0 || copies.is_empty() {
        return 0.0;
    }
    // Intersection length of two merged interval sets.
    let mut inter = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < kernels.len() && j < copies.len() {
        let lo = kernels[i].0.max(copies[j].0);
        let hi = kernels[i].1.min(copies[j].1);
        if hi > lo {
            inter += hi - lo;
        }
        if kernels[i].1 < copies[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    inter / kernel_total
}

// ---------------------------------------------------------------------------
// Parameter sweeps and the synthetic workload generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub sp: usize,
    pub sb: usize,
    pub makespan: f64,
    pub overlap: f64,
}

/// Run the simulator over every (S_p, S_b) combination the generator can
/// emit. Combinations with S_b > S_p are skipped.
pub fn sweep(
    generator: &mut dyn FnMut(usize, usize) -> Vec<TraceRow>,
    sps: &[usize],
    sbs: &[usize],
    model: &DeviceModel,
) -> Result<Vec<SweepRow>, SolverError> {
    let mut rows = Vec::new();
    for &sp in sps {
        for &sb in sbs {
            if sb > sp {
                continue;
            }
            let trace = generator(sp, sb);
            let tl = simulate(&trace, model)?;
            rows.push(SweepRow { sp, sb, makespan: tl.makespan, overlap: tl.overlap_fraction });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "sp,sb,makespan,overlap_fraction")?;
    for r in rows {
        writeln!(out, "{},{},{:.9},{:.6}", r.sp, r.sb, r.makespan, r.overlap)?;
    }
    // Monotonicity diagnostics: per pack size, does the makespan shrink as
    // the bundle size shrinks?
    let mut sps: Vec<usize> = rows.iter().map(|r| r.sp).collect();
    sps.sort_unstable();
    sps.dedup();
    for sp in sps {
        let mut per: Vec<&SweepRow> = rows.iter().filter(|r| r.sp == sp).collect();
        per.sort_by_key(|r| r.sb);
        let monotone =
            per.windows(2).all(|w| w[0].makespan <= w[1].makespan + 1e-12);
        writeln!(out, "# sp={sp}: makespan_monotone_in_sb={monotone}")?;
    }
    Ok(())
}

/// Deterministic virtual-time trace synthesiser for a task-parallel offload
/// workload: workers pack their assigned tasks at a fixed host cost per
/// particle, flush full packs as bundle chains with tightly grouped
/// asynchronous submits, then wait out the unpack before packing on
/// (per-worker serialisation). Worker start times are staggered.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticWorkload {
    pub workers: usize,
    pub self_tasks: usize,
    pub pair_tasks: usize,
    pub particles_per_cell: usize,
    /// Fraction of pair-candidate interactions that survive the sorted-list
    /// pruning; scales the pair kernels' interaction estimate.
    pub pair_candidate_fraction: f64,
    pub pack_cost_per_particle: f64,
    pub unpack_cost_per_particle: f64,
    pub worker_stagger: f64,
}

impl SyntheticWorkload {
    /// A 2-worker workload shaped like a 16^3 benchmark box: 64 cells of 64
    /// particles, 13 pairs per cell.
    pub fn two_worker_16cubed() -> Self {
        SyntheticWorkload {
            workers: 2,
            self_tasks: 64,
            pair_tasks: 832,
            particles_per_cell: 64,
            pair_candidate_fraction: 0.3,
            pack_cost_per_particle: 1e-6,
            unpack_cost_per_particle: 1e-6,
            worker_stagger: 2e-3,
        }
    }

    pub fn generate(&self, cfg: &OffloadConfig) -> Vec<TraceRow> {
        let mut rows = Vec::new();
        let mut bundle_id = 0u64;
        for w in 0..self.workers {
            let mut t = w as f64 * self.worker_stagger;
            let mut emit_tasks = |t: &mut f64,
                                  rows: &mut Vec<TraceRow>,
                                  n_tasks: usize,
                                  kind: PackKind,
                                  particles_per_task: u64,
                                  interactions_per_task: u64| {
                let sp = cfg.pack_size(kind);
                let sb = cfg.bundle_size(kind);
                let pool = cfg.stream_pool(kind);
                let mut packed = 0usize;
                let mut remaining = n_tasks;
                while remaining > 0 {
                    let take = remaining.min(sp - packed);
                    *t += take as f64 * particles_per_task as f64 * self.pack_cost_per_particle;
                    packed += take;
                    remaining -= take;
                    if packed == sp || remaining == 0 {
                        // Flush: submit ceil(packed/sb) bundle chains now.
                        let mut first = 0usize;
                        let mut k = 0usize;
                        let mut sub = *t;
                        while first < packed {
                            let tasks = sb.min(packed - first);
                            let stream =
                                (w * cfg.stream_pool_cap.max(1) + (k % pool)) as u32;
                            let particles = tasks as u64 * particles_per_task;
                            let interactions = tasks as u64 * interactions_per_task;
                            let send_bytes = particles * 40;
                            let recv_bytes = particles * 32;
                            for (op, amount) in [
                                (TraceOp::H2d, send_bytes),
                                (TraceOp::Kernel, tasks as u64),
                                (TraceOp::D2h, recv_bytes),
                                (TraceOp::Event, 0),
                            ] {
                                rows.push(TraceRow {
                                    worker: w as u32,
                                    stream,
                                    op,
                                    loop_kind: LoopKind::Density,
                                    bundle: bundle_id,
                                    bytes_or_tasks: amount,
                                    particles,
                                    interactions,
                                    t_submit: sub,
                                    t_start: sub,
                                    t_end: sub,
                                });
                                sub += 1e-9;
                            }
                            bundle_id += 1;
                            first += tasks;
                            k += 1;
                        }
                        // Per-worker serialisation: wait out the unpack.
                        *t = sub
                            + packed as f64
                                * particles_per_task as f64
                                * self.unpack_cost_per_particle;
                        packed = 0;
                    }
                }
            };

            let ppc = self.particles_per_cell as u64;
            let self_share = per_worker_share(self.self_tasks, self.workers, w);
            let pair_share = per_worker_share(self.pair_tasks, self.workers, w);
            emit_tasks(
                &mut t,
                &mut rows,
                self_share,
                PackKind::SelfPack,
                ppc,
                ppc * ppc.saturating_sub(1) / 2,
            );
            emit_tasks(
                &mut t,
                &mut rows,
                pair_share,
                PackKind::PairPack,
                2 * ppc,
                ((ppc * ppc) as f64 * self.pair_candidate_fraction) as u64,
            );
        }
        rows
    }
}

fn per_worker_share(total: usize, workers: usize, w: usize) -> usize {
    total / workers + usize::from(w < total % workers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_rows(specs: &[(u32, u32, TraceOp, u64, u64, u64, f64)]) -> Vec<TraceRow> {
        specs
            .iter()
            .map(|&(worker, stream, op, bytes, particles, interactions, t_submit)| TraceRow {
                worker,
                stream,
                op,
                loop_kind: LoopKind::Density,
                bundle: 0,
                bytes_or_tasks: bytes,
                particles,
                interactions,
                t_submit,
                t_start: t_submit,
                t_end: t_submit,
            })
            .collect()
    }

    fn zero_latency_model() -> DeviceModel {
        DeviceModel {
            link_latency: 0.0,
            launch_overhead: 0.0,
            per_particle: 0.0,
            per_interaction: 1e-6,
            ..DeviceModel::nvlink_like()
        }
    }

    #[test]
    fn single_stream_is_serial_with_exact_copy_time() {
        // H2D of 40 MB at 50 GB/s with zero latency takes 0.8 ms.
        let model = zero_latency_model();
        let rows = chain_rows(&[
            (0, 0, TraceOp::H2d, 40_000_000, 0, 0, 0.0),
            (0, 0, TraceOp::Kernel, 1, 0, 1000, 0.0),
            (0, 0, TraceOp::D2h, 1_000_000, 0, 0, 0.0),
        ]);
        let tl = simulate(&rows, &model).unwrap();
        let h2d = &tl.ops[0];
        assert!((h2d.t_end - h2d.t_start - 0.0008).abs() < 1e-12);
        // Strictly serial: each op starts when its predecessor ends.
        assert_eq!(tl.ops[1].t_start, tl.ops[0].t_end);
        assert_eq!(tl.ops[2].t_start, tl.ops[1].t_end);
        assert_eq!(tl.overlap_fraction, 0.0);
    }

    /// Hand-computed 6-op schedule: two streams, kernel longer than copies.
    #[test]
    fn two_stream_overlap_matches_hand_schedule() {
        let model = zero_latency_model();
        // Copies 1 ms (50 MB at 50 GB/s), kernels 2 ms (2000 interactions at
        // 1 us each).
        let c = 50_000_000u64;
        let rows = chain_rows(&[
            (0, 0, TraceOp::H2d, c, 0, 0, 0.0),
            (0, 0, TraceOp::Kernel, 1, 0, 2000, 0.0),
            (0, 0, TraceOp::D2h, c, 0, 0, 0.0),
            (0, 1, TraceOp::H2d, c, 0, 0, 0.0),
            (0, 1, TraceOp::Kernel, 1, 0, 2000, 0.0),
            (0, 1, TraceOp::D2h, c, 0, 0, 0.0),
        ]);
        let tl = simulate(&rows, &model).unwrap();
        let find = |stream: u32, op: TraceOp| {
            tl.ops.iter().find(|o| o.stream == stream && o.op == op).unwrap()
        };
        let ms = 1e-3;
        // Hand schedule: H2D0 [0,1), H2D1 [1,2), K0 [1,3), K1 [3,5),
        // D2H0 [3,4), D2H1 [5,6).
        assert!((find(0, TraceOp::H2d).t_end - ms).abs() < 1e-9);
        assert!((find(1, TraceOp::H2d).t_start - ms).abs() < 1e-9);
        assert!((find(0, TraceOp::Kernel).t_start - ms).abs() < 1e-9);
        assert!((find(1, TraceOp::Kernel).t_start - 3.0 * ms).abs() < 1e-9);
        assert!((find(0, TraceOp::D2h).t_start - 3.0 * ms).abs() < 1e-9);
        assert!((tl.makespan - 6.0 * ms).abs() < 1e-9);
        // Kernel busy 4 ms; copies inside kernel windows: H2D1 [1,2) and
        // D2H0 [3,4) and D2H1 [5,6) -> only the first two overlap kernels.
        let expect = (1.0 + 1.0) / 4.0;
        assert!((tl.overlap_fraction - expect).abs() < 1e-9, "{}", tl.overlap_fraction);
    }

    #[test]
    fn one_worker_single_bundle_has_zero_overlap() {
        let wl = SyntheticWorkload {
            workers: 1,
            self_tasks: 64,
            pair_tasks: 0,
            ..SyntheticWorkload::two_worker_16cubed()
        };
        let cfg = OffloadConfig { sp_self: 64, sb_self: 64, ..Default::default() }
            .normalise()
            .unwrap();
        let rows = wl.generate(&cfg);
        let tl = simulate(&rows, &DeviceModel::nvlink_like()).unwrap();
        assert_eq!(tl.overlap_fraction, 0.0);
    }

    #[test]
    fn determinism_bit_for_bit() {
        let wl = SyntheticWorkload::two_worker_16cubed();
        let cfg = OffloadConfig { sp_self: 64, sb_self: 16, sp_pair: 32, sb_pair: 8, ..Default::default() }
            .normalise()
            .unwrap();
        let rows = wl.generate(&cfg);
        let a = simulate(&rows, &DeviceModel::nvlink_like()).unwrap();
        let b = simulate(&rows, &DeviceModel::nvlink_like()).unwrap();
        assert_eq!(a.makespan.to_bits(), b.makespan.to_bits());
        assert_eq!(a.ops.len(), b.ops.len());
        for (x, y) in a.ops.iter().zip(b.ops.iter()) {
            assert_eq!(x.t_start.to_bits(), y.t_start.to_bits());
            assert_eq!(x.t_end.to_bits(), y.t_end.to_bits());
            assert_eq!(x.index, y.index);
        }
    }

    #[test]
    fn per_stream_fifo_preserved() {
        let wl = SyntheticWorkload::two_worker_16cubed();
        let cfg = OffloadConfig { sp_self: 32, sb_self: 8, sp_pair: 16, sb_pair: 4, ..Default::default() }
            .normalise()
            .unwrap();
        let rows = wl.generate(&cfg);
        let tl = simulate(&rows, &DeviceModel::nvlink_like()).unwrap();
        let mut per_stream: std::collections::HashMap<u32, Vec<(usize, f64)>> = Default::default();
        for o in &tl.ops {
            per_stream.entry(o.stream).or_default().push((o.index, o.t_end));
        }
        for ops in per_stream.values_mut() {
            ops.sort_by_key(|o| o.0);
            for w in ops.windows(2) {
                assert!(w[0].1 <= w[1].1 + 1e-15, "stream order violated");
            }
        }
    }

    #[test]
    fn conservation_of_work() {
        let wl = SyntheticWorkload::two_worker_16cubed();
        let cfg = OffloadConfig { sp_self: 64, sb_self: 16, sp_pair: 32, sb_pair: 8, ..Default::default() }
            .normalise()
            .unwrap();
        let model = DeviceModel::nvlink_like();
        let rows = wl.generate(&cfg);
        let tl = simulate(&rows, &model).unwrap();
        // Capacity-1 engines: busy time equals the summed durations.
        for (res, busy) in [
            (TraceOp::H2d, tl.busy_h2d),
            (TraceOp::D2h, tl.busy_d2h),
            (TraceOp::Kernel, tl.busy_kernel),
        ] {
            let total: f64 = tl
                .ops
                .iter()
                .filter(|o| o.op == res)
                .map(|o| o.t_end - o.t_start)
                .sum();
            assert!((busy - total).abs() < 1e-9, "{res:?}: {busy} vs {total}");
            assert!(tl.makespan + 1e-12 >= busy);
        }
    }

    #[test]
    fn sweep_single_combination_equals_direct_call() {
        let wl = SyntheticWorkload::two_worker_16cubed();
        let model = DeviceModel::nvlink_like();
        let mut generator = |sp: usize, sb: usize| {
            let cfg = OffloadConfig {
                sp_self: sp,
                sb_self: sb,
                sp_pair: (sp / 2).max(1),
                sb_pair: (sb / 2).max(1),
                ..Default::default()
            }
            .normalise()
            .unwrap();
            wl.generate(&cfg)
        };
        let rows = sweep(&mut generator, &[64], &[16], &model).unwrap();
        assert_eq!(rows.len(), 1);
        let direct = simulate(&generator(64, 16), &model).unwrap();
        assert_eq!(rows[0].makespan.to_bits(), direct.makespan.to_bits());

        // The CSV writer appends monotonicity diagnostics per pack size.
        let grid = sweep(&mut generator, &[64], &[16, 32, 64], &model).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&grid, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sp,sb,makespan,overlap_fraction\n"));
        assert!(text.contains("# sp=64: makespan_monotone_in_sb="), "{text}");
    }

    /// The two regimes: with kernel-bound settings smaller bundles win
    /// through overlap; with launch overhead dominant, fewer kernels win.
    #[test]
    fn bundle_size_regimes() {
        let wl = SyntheticWorkload::two_worker_16cubed();
        let model = DeviceModel::nvlink_like();
        let generator = |sp: usize, sb: usize| {
            let cfg = OffloadConfig {
                sp_self: sp,
                sb_self: sb,
                sp_pair: (sp / 2).max(1),
                sb_pair: (sb / 2).max(1),
                ..Default::default()
            }
            .normalise()
            .unwrap();
            wl.generate(&cfg)
        };
        let full = simulate(&generator(64, 64), &model).unwrap();
        let quarter = simulate(&generator(64, 16), &model).unwrap();
        assert!(
            quarter.makespan < full.makespan,
            "expected pipelining to win: {} vs {}",
            quarter.makespan,
            full.makespan
        );
        assert_eq!(full.overlap_fraction, 0.0);
        assert!(quarter.overlap_fraction > 0.0);

        let overhead_model =
            DeviceModel { launch_overhead: model.launch_overhead * 100.0, ..model };
        let full_oh = simulate(&generator(64, 64), &overhead_model).unwrap();
        let quarter_oh = simulate(&generator(64, 16), &overhead_model).unwrap();
        assert!(
            full_oh.makespan < quarter_oh.makespan,
            "expected overhead to invert the ordering: {} vs {}",
            full_oh.makespan,
            quarter_oh.makespan
        );
    }

    /// Per-bundle events let the host start unpacking a bundle while a later
    /// bundle's copy-back is still in flight.
    #[test]
    fn unpack_can_start_before_next_bundle_returns() {
        let wl = SyntheticWorkload::two_worker_16cubed();
        let cfg = OffloadConfig { sp_self: 64, sb_self: 16, sp_pair: 32, sb_pair: 8, ..Default::default() }
            .normalise()
            .unwrap();
        let tl = simulate(&wl.generate(&cfg), &DeviceModel::nvlink_like()).unwrap();
        let event_end = |bundle: u64| {
            tl.ops
                .iter()
                .find(|o| o.bundle == bundle && o.op == TraceOp::Event)
                .map(|o| o.t_end)
        };
        let d2h_end = |bundle: u64| {
            tl.ops
                .iter()
                .find(|o| o.bundle == bundle && o.op == TraceOp::D2h)
                .map(|o| o.t_end)
        };
        // Bundles 0..3 form worker 0's first flush.
        let mut witnessed = false;
        for k in 0..3u64 {
            if let (Some(ev), Some(next_d2h)) = (event_end(k), d2h_end(k + 1)) {
                if ev < next_d2h {
                    witnessed = true;
                }
            }
        }
        assert!(witnessed, "no bundle's results were ready before the next copy-back finished");
    }

    #[test]
    fn empty_trace_overlap_is_zero() {
        let tl = simulate(&[], &DeviceModel::nvlink_like()).unwrap();
        assert_eq!(tl.overlap_fraction, 0.0);
        assert_eq!(tl.makespan, 0.0);
    }

    #[test]
    fn rejects_non_monotone_submits() {
        let mut rows = chain_rows(&[
            (0, 0, TraceOp::H2d, 100, 0, 0, 1.0),
            (0, 1, TraceOp::H2d, 100, 0, 0, 0.5),
        ]);
        let err = simulate(&rows, &DeviceModel::nvlink_like()).unwrap_err().to_string();
        assert!(err.contains("non-monotone"), "{err}");
        rows[1].t_submit = 2.0;
        assert!(simulate(&rows, &DeviceModel::nvlink_like()).is_ok());
    }
}
