//! Pack -> bundle -> stream offload pipeline over an abstract device backend.
//!
//! Loop tasks in offload mode stage their particle data into worker-private
//! pack buffers as flat transfer records. Once S_p tasks are packed the
//! buffer is flushed: the tasks are split into bundles of S_b, and each
//! bundle's copy-in, kernel, copy-out and completion event are submitted to
//! an instruction stream. Unpacking waits per-bundle on the events and
//! scatters results back, then releases the dependents of the packed tasks.

use crate::error::SolverError;
use crate::loops::{self, LoopKind, LoopParams};
use crate::records::*;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Instant;

/// Number of loops routed through the pipeline (density, gradient, force).
pub const N_LOOPS: u64 = 3;
/// Nominal average transfer-record size used by the sizing formula.
pub const M_STRUCT: u64 = 44;

/// Particles offloaded per cycle and device bytes allocated per host thread.
pub fn device_sizing(n_p: u64, s_p: u64, n_c: u64) -> Result<(u64, u64), SolverError> {
    if n_c == 0 {
        return Err(SolverError::Config("device sizing requires a non-zero cell count".into()));
    }
    let n_offload = s_p * n_p / n_c;
    let m_t = 4 * N_LOOPS * n_offload * M_STRUCT;
    Ok((n_offload, m_t))
}

/// Cell count of a uniform decomposition into cells of volume (2h)^3.
pub fn uniform_cell_count(box_side: f64, h: f64) -> u64 {
    let per_dim = (box_side / (2.0 * h)).max(1.0);
    (per_dim * per_dim * per_dim).round() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PackKind {
    SelfPack,
    PairPack,
}

#[derive(Debug, Clone, Copy)]
pub struct OffloadConfig {
    pub sp_self: usize,
    pub sb_self: usize,
    pub sp_pair: usize,
    pub sb_pair: usize,
    /// Cap on the per-worker stream pool.
    pub stream_pool_cap: usize,
}

impl Default for OffloadConfig {
    fn default() -> Self {
        OffloadConfig { sp_self: 256, sb_self: 64, sp_pair: 128, sb_pair: 32, stream_pool_cap: 8 }
    }
}

impl OffloadConfig {
    /// Validate and normalise: bundle sizes are rounded down to the nearest
    /// divisor of their pack size.
    pub fn normalise(mut self) -> Result<Self, SolverError> {
        for (sp, sb, name) in [
            (self.sp_self, &mut self.sb_self, "self"),
            (self.sp_pair, &mut self.sb_pair, "pair"),
        ] {
            if sp == 0 || *sb == 0 {
                return Err(SolverError::Config(format!(
                    "pack and bundle sizes for {name} tasks must be positive"
                )));
            }
            if *sb > sp {
                return Err(SolverError::Config(format!(
                    "sb_{name} ({sb}) exceeds sp_{name} ({sp})"
                )));
            }
            while sp % *sb != 0 {
                *sb -= 1;
            }
        }
        Ok(self)
    }

    pub fn pack_size(&self, kind: PackKind) -> usize {
        match kind {
            PackKind::SelfPack => self.sp_self,
            PackKind::PairPack => self.sp_pair,
        }
    }

    pub fn bundle_size(&self, kind: PackKind) -> usize {
        match kind {
            PackKind::SelfPack => self.sb_self,
            PackKind::PairPack => self.sb_pair,
        }
    }

    pub fn stream_pool(&self, kind: PackKind) -> usize {
        (self.pack_size(kind) / self.bundle_size(kind)).clamp(1, self.stream_pool_cap)
    }
}

// ---------------------------------------------------------------------------
// Device backend interface
// ---------------------------------------------------------------------------

pub type BufferId = u32;
pub type StreamId = u32;
pub type EventId = u64;

#[derive(Debug)]
pub enum DeviceOp {
    CopyToDevice { buf: BufferId, offset: usize, bytes: Vec<u8> },
    Kernel { loop_kind: LoopKind, in_buf: BufferId, out_buf: BufferId, first_rec: usize, n_rec: usize },
    CopyFromDevice { buf: BufferId, offset: usize, len: usize },
    RecordEvent { event: EventId },
}

/// Minimal device contract: allocation, stream-ordered submission, events.
/// Operations within one stream complete in FIFO submission order; distinct
/// streams carry no relative ordering. `wait_event` blocks only the caller.
pub trait DeviceBackend: Sync {
    fn allocate(&self, bytes: usize) -> BufferId;
    fn submit(&self, stream: StreamId, op: DeviceOp);
    fn wait_event(&self, event: EventId);
    /// Read back a host-visible range of a buffer; valid once the event
    /// recorded after the covering copy-out has fired.
    fn read_host(&self, buf: BufferId, offset: usize, dst: &mut [u8]);
}

/// Functional host-side backend: copies are buffer copies and kernels run the
/// loop functions synchronously on the submitting thread. Stream FIFO order
/// holds trivially; events fire on completion of their stream prefix.
pub struct HostExecutor {
    params: LoopParams,
    buffers: Mutex<Vec<BufferSlot>>,
    events: Mutex<std::collections::HashSet<EventId>>,
    events_cv: Condvar,
    /// Per-stream completion counters, for contract tests.
    stream_seq: Mutex<HashMap<StreamId, u64>>,
    degenerate: AtomicU64,
}

struct BufferSlot {
    dev: Vec<u8>,
    host: Vec<u8>,
}

impl HostExecutor {
    pub fn new(params: LoopParams) -> Self {
        HostExecutor {
            params,
            buffers: Mutex::new(Vec::new()),
            events: Mutex::new(Default::default()),
            events_cv: Condvar::new(),
            stream_seq: Mutex::new(HashMap::new()),
            degenerate: AtomicU64::new(0),
        }
    }

    pub fn take_degenerate(&self) -> u64 {
        self.degenerate.swap(0, Ordering::Relaxed)
    }

    pub fn stream_completions(&self, stream: StreamId) -> u64 {
        *self.stream_seq.lock().unwrap().get(&stream).unwrap_or(&0)
    }

    fn run_kernel(
        &self,
        loop_kind: LoopKind,
        in_buf: BufferId,
        out_buf: BufferId,
        first: usize,
        n: usize,
    ) {
        let mut bufs = self.buffers.lock().unwrap();
        macro_rules! dispatch {
            ($send:ty, $recv:ty, $kernel:path) => {{
                let send: Vec<$send> = from_bytes(&bufs[in_buf as usize].dev);
                let mut out = vec![<$recv>::default(); n];
                let degen = $kernel(&send, first, n, &mut out, &self.params);
                self.degenerate.fetch_add(degen, Ordering::Relaxed);
                let bytes = as_bytes(&out);
                let off = first * std::mem::size_of::<$recv>();
                bufs[out_buf as usize].dev[off..off + bytes.len()].copy_from_slice(bytes);
            }};
        }
        match loop_kind {
            LoopKind::Density => {
                dispatch!(SendRecordDensity, RecvRecordDensity, loops::density_kernel)
            }
            LoopKind::Gradient => {
                dispatch!(SendRecordGradient, RecvRecordGradient, loops::gradient_kernel)
            }
            LoopKind::Force => dispatch!(SendRecordForce, RecvRecordForce, loops::force_kernel),
        }
    }
}

impl DeviceBackend for HostExecutor {
    fn allocate(&self, bytes: usize) -> BufferId {
        let mut bufs = self.buffers.lock().unwrap();
        bufs.push(BufferSlot { dev: vec![0; bytes], host: vec![0; bytes] });
        (bufs.len() - 1) as BufferId
    }

    fn submit(&self, stream: StreamId, op: DeviceOp) {
        match op {
            DeviceOp::CopyToDevice { buf, offset, bytes } => {
                let mut bufs = self.buffers.lock().unwrap();
                bufs[buf as usize].dev[offset..offset + bytes.len()].copy_from_slice(&bytes);
            }
            DeviceOp::Kernel { loop_kind, in_buf, out_buf, first_rec, n_rec } => {
                self.run_kernel(loop_kind, in_buf, out_buf, first_rec, n_rec);
            }
            DeviceOp::CopyFromDevice { buf, offset, len } => {
                let mut bufs = self.buffers.lock().unwrap();
                let slot = &mut bufs[buf as usize];
                let (dev, host) = (&slot.dev, &mut slot.host);
                host[offset..offset + len].copy_from_slice(&dev[offset..offset + len]);
            }
            DeviceOp::RecordEvent { event } => {
                self.events.lock().unwrap().insert(event);
                self.events_cv.notify_all();
            }
        }
        *self.stream_seq.lock().unwrap().entry(stream).or_insert(0) += 1;
    }

    fn wait_event(&self, event: EventId) {
        let mut fired = self.events.lock().unwrap();
        loop {
            if fired.contains(&event) {
                return;
            }
            let (guard, timeout) = self
                .events_cv
                .wait_timeout(fired, std::time::Duration::from_secs(30))
                .unwrap();
            fired = guard;
            if timeout.timed_out() && !fired.contains(&event) {
                panic!("device event {event} never fired (watchdog timeout)");
            }
        }
    }

    fn read_host(&self, buf: BufferId, offset: usize, dst: &mut [u8]) {
        let bufs = self.buffers.lock().unwrap();
        dst.copy_from_slice(&bufs[buf as usize].host[offset..offset + dst.len()]);
    }
}

// ---------------------------------------------------------------------------
// Trace log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOp {
    H2d,
    Kernel,
    D2h,
    Event,
}

impl TraceOp {
    pub fn label(&self) -> &'static str {
        match self {
            TraceOp::H2d => "H2D",
            TraceOp::Kernel => "KERNEL",
            TraceOp::D2h => "D2H",
            TraceOp::Event => "EVENT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "H2D" => Some(TraceOp::H2d),
            "KERNEL" => Some(TraceOp::Kernel),
            "D2H" => Some(TraceOp::D2h),
            "EVENT" => Some(TraceOp::Event),
            _ => None,
        }
    }
}

/// One device operation as seen by the offline simulator. Times in seconds.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub worker: u32,
    pub stream: StreamId,
    pub op: TraceOp,
    pub loop_kind: LoopKind,
    pub bundle: u64,
    pub bytes_or_tasks: u64,
    pub particles: u64,
    pub interactions: u64,
    pub t_submit: f64,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug)]
pub struct TraceLog {
    rows: Mutex<Vec<TraceRow>>,
    start: Instant,
}

impl Default for TraceLog {
    fn default() -> Self {
        Self::new()
    }
}

impl TraceLog {
    pub fn new() -> Self {
        TraceLog { rows: Mutex::new(Vec::new()), start: Instant::now() }
    }

    pub fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn push(&self, row: TraceRow) {
        self.rows.lock().unwrap().push(row);
    }

    pub fn snapshot(&self) -> Vec<TraceRow> {
        self.rows.lock().unwrap().clone()
    }
}

pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "worker,stream,op,loop,bundle_id,bytes_or_tasks,particles,interactions,t_submit,t_start,t_end"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.9},{:.9},{:.9}",
            r.worker,
            r.stream,
            r.op.label(),
            r.loop_kind.label(),
            r.bundle,
            r.bytes_or_tasks,
            r.particles,
            r.interactions,
            r.t_submit,
            r.t_start,
            r.t_end
        )?;
    }
    Ok(())
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>, SolverError> {
    let mut rows = Vec::new();
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| SolverError::Config("trace file is empty".into()))?
        .1;
    if !header.starts_with("worker,stream,op,loop,bundle_id") {
        return Err(SolverError::Config("line 1: unrecognised trace header".into()));
    }
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(SolverError::Config(format!(
                "line {}: expected 11 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_err =
            |what: &str| SolverError::Config(format!("line {}: malformed {what}", lineno + 1));
        let loop_kind = match fields[3] {
            "density" => LoopKind::Density,
            "gradient" => LoopKind::Gradient,
            "force" => LoopKind::Force,
            _ => return Err(parse_err("loop kind")),
        };
        rows.push(TraceRow {
            worker: fields[0].parse().map_err(|_| parse_err("worker"))?,
            stream: fields[1].parse().map_err(|_| parse_err("stream"))?,
            op: TraceOp::parse(fields[2]).ok_or_else(|| parse_err("op"))?,
            loop_kind,
            bundle: fields[4].parse().map_err(|_| parse_err("bundle id"))?,
            bytes_or_tasks: fields[5].parse().map_err(|_| parse_err("bytes_or_tasks"))?,
            particles: fields[6].parse().map_err(|_| parse_err("particles"))?,
            interactions: fields[7].parse().map_err(|_| parse_err("interactions"))?,
            t_submit: fields[8].parse().map_err(|_| parse_err("t_submit"))?,
            t_start: fields[9].parse().map_err(|_| parse_err("t_start"))?,
            t_end: fields[10].parse().map_err(|_| parse_err("t_end"))?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Pack buffers
// ---------------------------------------------------------------------------

/// One packed task's metadata: where its records sit in the pack array and
/// which particle ranges they came from.
#[derive(Debug, Clone)]
pub struct PackedTask {
    pub task_id: u32,
    pub sides: Vec<PackSide>,
}

#[derive(Debug, Clone, Copy)]
pub struct PackSide {
    pub top_cell: u32,
    pub sys_first: usize,
    pub count: usize,
    pub rec_first: usize,
}

impl PackedTask {
    pub fn particles(&self) -> usize {
        self.sides.iter().map(|s| s.count).sum()
    }

    /// Pair evaluations the device kernel performs for this task.
    pub fn interaction_estimate(&self) -> u64 {
        match self.sides.len() {
            1 => {
                let n = self.sides[0].count as u64;
                n * n.saturating_sub(1) / 2
            }
            2 => self.sides[0].count as u64 * self.sides[1].count as u64,
            _ => 0,
        }
    }
}

/// Worker-private staging buffer for one (loop, task kind) combination.
#[derive(Debug)]
pub struct PackBuffer {
    pub loop_kind: LoopKind,
    pub kind: PackKind,
    pub send_bytes: Vec<u8>,
    pub n_records: usize,
    pub tasks: Vec<PackedTask>,
}

impl PackBuffer {
    pub fn new(loop_kind: LoopKind, kind: PackKind) -> Self {
        PackBuffer { loop_kind, kind, send_bytes: Vec::new(), n_records: 0, tasks: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn reset(&mut self) {
        self.send_bytes.clear();
        self.n_records = 0;
        self.tasks.clear();
    }

    /// Append one task's records. `sides` carries (top cell, sys range); the
    /// record array offsets are assigned here.
    pub fn push_task<T: PodRecord>(&mut self, task_id: u32, mut sides: Vec<PackSide>, records: &[T]) {
        debug_assert_eq!(records.len(), sides.iter().map(|s| s.count).sum::<usize>());
        let mut base = self.n_records;
        for s in sides.iter_mut() {
            s.rec_first = base;
            base += s.count;
        }
        self.send_bytes.extend_from_slice(as_bytes(records));
        self.n_records = base;
        self.tasks.push(PackedTask { task_id, sides });
    }

    /// Split packed tasks into bundles of `sb` (remainder last) and describe
    /// the record range each bundle covers.
    pub fn bundles(&self, sb: usize) -> Vec<BundleDesc> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.tasks.len() {
            let end = (i + sb).min(self.tasks.len());
            let first_rec = self.tasks[i].sides[0].rec_first;
            let last = &self.tasks[end - 1];
            let last_side = last.sides.last().unwrap();
            let end_rec = last_side.rec_first + last_side.count;
            out.push(BundleDesc {
                task_range: (i, end),
                first_rec,
                n_rec: end_rec - first_rec,
                particles: self.tasks[i..end].iter().map(|t| t.particles() as u64).sum(),
                interactions: self.tasks[i..end].iter().map(|t| t.interaction_estimate()).sum(),
            });
            i = end;
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BundleDesc {
    pub task_range: (usize, usize),
    pub first_rec: usize,
    pub n_rec: usize,
    pub particles: u64,
    pub interactions: u64,
}
