//! The three pairwise SPH loops (density, gradient, force).
//!
//! All three run over flat send-record arrays in which every record carries
//! the inclusive index range `cf..=cl` of the records it gathers from. The
//! same functions execute on the CPU path and inside device-backend kernels;
//! per-record accumulation is in f64 with neighbours visited in ascending
//! record index, so a sorted pair walk and the plain double loop produce
//! bit-identical partial sums.

use crate::kernel::KernelSpec;
use crate::records::*;
use crate::system::ParticleSystem;
use crate::tree::SortedList;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoopKind {
    Density,
    Gradient,
    Force,
}

impl LoopKind {
    pub fn label(&self) -> &'static str {
        match self {
            LoopKind::Density => "density",
            LoopKind::Gradient => "gradient",
            LoopKind::Force => "force",
        }
    }

    pub fn send_size(&self) -> usize {
        match self {
            LoopKind::Density => std::mem::size_of::<SendRecordDensity>(),
            LoopKind::Gradient => std::mem::size_of::<SendRecordGradient>(),
            LoopKind::Force => std::mem::size_of::<SendRecordForce>(),
        }
    }

    pub fn recv_size(&self) -> usize {
        match self {
            LoopKind::Density => std::mem::size_of::<RecvRecordDensity>(),
            LoopKind::Gradient => std::mem::size_of::<RecvRecordGradient>(),
            LoopKind::Force => std::mem::size_of::<RecvRecordForce>(),
        }
    }
}

/// Parameters every loop kernel needs.
#[derive(Debug, Clone, Copy)]
pub struct LoopParams {
    pub kernel: KernelSpec,
    pub box_side: f64,
    /// Signal-velocity beta of the viscosity switch.
    pub visc_beta: f64,
}

/// One task's block inside a record batch: either a self block or a pair of
/// blocks. Used to validate batches before execution.
#[derive(Debug, Clone, Copy)]
pub enum BatchBlock {
    SelfBlock { first: usize, count: usize },
    PairBlock { a_first: usize, a_count: usize, b_first: usize, b_count: usize },
}

/// Check that a batch's blocks are within bounds and non-overlapping.
pub fn validate_blocks(n_records: usize, blocks: &[BatchBlock]) -> bool {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for b in blocks {
        match *b {
            BatchBlock::SelfBlock { first, count } => spans.push((first, count)),
            BatchBlock::PairBlock { a_first, a_count, b_first, b_count } => {
                spans.push((a_first, a_count));
                spans.push((b_first, b_count));
            }
        }
    }
    spans.sort_unstable();
    let mut end = 0usize;
    for (first, count) in spans {
        if first < end || first + count > n_records {
            return false;
        }
        end = first + count;
    }
    true
}

#[inline(always)]
fn separation(a: &[f32; 3], b: &[f32; 3], l: f64) -> ([f64; 3], f64) {
    let dx = [
        ParticleSystem::min_image(a[0] as f64 - b[0] as f64, l),
        ParticleSystem::min_image(a[1] as f64 - b[1] as f64, l),
        ParticleSystem::min_image(a[2] as f64 - b[2] as f64, l),
    ];
    (dx, dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2])
}

// ---------------------------------------------------------------------------
// Density loop
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone)]
pub struct DensityAccum {
    pub rho: f64,
    pub wcount: f64,
    pub wcount_dh: f64,
    pub rho_dh: f64,
    pub div: f64,
    pub curl: [f64; 3],
    pub degenerate: u64,
}

impl DensityAccum {
    #[inline]
    pub fn to_record(&self) -> RecvRecordDensity {
        RecvRecordDensity {
            rho: self.rho as f32,
            rho_dh: self.rho_dh as f32,
            wcount: self.wcount as f32,
            wcount_dh: self.wcount_dh as f32,
            curl: [self.curl[0] as f32, self.curl[1] as f32, self.curl[2] as f32],
            div: self.div as f32,
        }
    }
}

/// Self contribution of a particle to its own density sums.
#[inline(always)]
pub fn density_self_term(acc: &mut DensityAccum, m: f64, h: f64, params: &LoopParams) {
    let (w0, _) = params.kernel.eval_unchecked(0.0, h);
    let dwdh0 = -3.0 * w0 / h;
    acc.rho += m * w0;
    acc.wcount += w0;
    acc.wcount_dh += dwdh0;
    acc.rho_dh += m * dwdh0;
}

/// Gather contribution of neighbour `j` onto particle `i` (density loop,
/// asymmetric cut-off at gamma_k * h_i).
#[inline(always)]
pub fn density_term(
    acc: &mut DensityAccum,
    rec_i: &SendRecordDensity,
    rec_j: &SendRecordDensity,
    params: &LoopParams,
) {
    let hi = rec_i.h as f64;
    let support = params.kernel.support(hi);
    let (dx, r2) = separation(&rec_i.x, &rec_j.x, params.box_side);
    if r2 >= support * support {
        return;
    }
    if r2 == 0.0 {
        acc.degenerate += 1;
        return;
    }
    let r = r2.sqrt();
    let (w, dw_dr) = params.kernel.eval_unchecked(r, hi);
    let dw_dh = KernelSpec::dw_dh_from_eval(w, dw_dr, r, hi);
    let m = rec_j.m as f64;
    acc.rho += m * w;
    acc.wcount += w;
    acc.wcount_dh += dw_dh;
    acc.rho_dh += m * dw_dh;
    let dv = [
        rec_i.v[0] as f64 - rec_j.v[0] as f64,
        rec_i.v[1] as f64 - rec_j.v[1] as f64,
        rec_i.v[2] as f64 - rec_j.v[2] as f64,
    ];
    let fac = m * dw_dr / r;
    acc.div += fac * (dv[0] * dx[0] + dv[1] * dx[1] + dv[2] * dx[2]);
    acc.curl[0] += fac * (dv[1] * dx[2] - dv[2] * dx[1]);
    acc.curl[1] += fac * (dv[2] * dx[0] - dv[0] * dx[2]);
    acc.curl[2] += fac * (dv[0] * dx[1] - dv[1] * dx[0]);
}

/// Double-loop density kernel over records `first..first+count`; every record
/// gathers from its own `cf..=cl` range. Returns the degenerate-pair count.
pub fn density_kernel(
    all: &[SendRecordDensity],
    first: usize,
    count: usize,
    out: &mut [RecvRecordDensity],
    params: &LoopParams,
) -> u64 {
    debug_assert_eq!(out.len(), count);
    let mut degen = 0;
    for ri in first..first + count {
        let rec = &all[ri];
        let mut acc = DensityAccum::default();
        for j in rec.cf as usize..=rec.cl as usize {
            if j == ri {
                density_self_term(&mut acc, rec.m as f64, rec.h as f64, params);
            } else {
                density_term(&mut acc, rec, &all[j], params);
            }
        }
        degen += acc.degenerate;
        out[ri - first] = acc.to_record();
    }
    degen
}

// ---------------------------------------------------------------------------
// Gradient loop
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone)]
pub struct GradientAccum {
    pub v_sig: f64,
    pub lap_u: f64,
    pub degenerate: u64,
}

impl GradientAccum {
    #[inline]
    pub fn to_record(&self) -> RecvRecordGradient {
        RecvRecordGradient {
            v_sig: self.v_sig as f32,
            lap_u: self.lap_u as f32,
            pad: [0.0; 2],
        }
    }
}

#[inline(always)]
pub fn gradient_term(
    acc: &mut GradientAccum,
    rec_i: &SendRecordGradient,
    rec_j: &SendRecordGradient,
    params: &LoopParams,
) {
    let hi = rec_i.h as f64;
    let support = params.kernel.support(hi);
    let (dx, r2) = separation(&rec_i.x, &rec_j.x, params.box_side);
    if r2 >= support * support {
        return;
    }
    if r2 == 0.0 {
        acc.degenerate += 1;
        return;
    }
    let r = r2.sqrt();
    let dv_dx = (rec_i.v[0] as f64 - rec_j.v[0] as f64) * dx[0]
        + (rec_i.v[1] as f64 - rec_j.v[1] as f64) * dx[1]
        + (rec_i.v[2] as f64 - rec_j.v[2] as f64) * dx[2];
    let mu = if dv_dx < 0.0 { dv_dx / r } else { 0.0 };
    let v_sig = rec_i.cs as f64 + rec_j.cs as f64 - params.visc_beta * mu;
    acc.v_sig = acc.v_sig.max(v_sig);
    let (_, dw_dr) = params.kernel.eval_unchecked(r, hi);
    // Integral-approximation Laplacian of u, guarded at r -> 0 by the
    // degenerate branch above.
    acc.lap_u += 2.0 * (rec_j.m as f64 / rec_j.rho as f64)
        * (rec_i.u as f64 - rec_j.u as f64)
        * dw_dr
        / r;
}

pub fn gradient_kernel(
    all: &[SendRecordGradient],
    first: usize,
    count: usize,
    out: &mut [RecvRecordGradient],
    params: &LoopParams,
) -> u64 {
    debug_assert_eq!(out.len(), count);
    let mut degen = 0;
    for ri in first..first + count {
        let rec = &all[ri];
        let mut acc = GradientAccum::default();
        for j in rec.cf as usize..=rec.cl as usize {
            if j == ri {
                continue;
            }
            gradient_term(&mut acc, rec, &all[j], params);
        }
        degen += acc.degenerate;
        out[ri - first] = acc.to_record();
    }
    degen
}

// ---------------------------------------------------------------------------
// Force loop
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone)]
pub struct ForceAccum {
    pub a: [f64; 3],
    pub du_dt: f64,
    pub v_sig: f64,
    pub h_dt: f64,
    pub degenerate: u64,
}

impl ForceAccum {
    #[inline]
    pub fn to_record(&self) -> RecvRecordForce {
        RecvRecordForce {
            a: [self.a[0] as f32, self.a[1] as f32, self.a[2] as f32],
            du_dt: self.du_dt as f32,
            v_sig: self.v_sig as f32,
            h_dt: self.h_dt as f32,
            pad: [0.0; 2],
        }
    }
}

/// Force-loop pair term. The cut-off is symmetric, `r < gamma_k * max(h_i,
/// h_j)`, and the two kernel gradients are evaluated at h_i and h_j
/// respectively, which makes the pairwise momentum exchange antisymmetric.
#[inline(always)]
pub fn force_term(
    acc: &mut ForceAccum,
    rec_i: &SendRecordForce,
    rec_j: &SendRecordForce,
    params: &LoopParams,
) {
    let hi = rec_i.h as f64;
    let hj = rec_j.h as f64;
    let cut = params.kernel.support(hi.max(hj));
    let (dx, r2) = separation(&rec_i.x, &rec_j.x, params.box_side);
    if r2 >= cut * cut {
        return;
    }
    if r2 == 0.0 {
        acc.degenerate += 1;
        return;
    }
    let r = r2.sqrt();
    let (_, dwi) = params.kernel.eval_unchecked(r, hi);
    let (_, dwj) = params.kernel.eval_unchecked(r, hj);

    let m_j = rec_j.m as f64;
    let rho_i = rec_i.rho as f64;
    let rho_j = rec_j.rho as f64;
    let p_i = rec_i.p as f64;
    let p_j = rec_j.p as f64;
    let f_i = rec_i.f as f64;
    let f_j = rec_j.f as f64;
    let u_i = rec_i.u as f64;
    let u_j = rec_j.u as f64;

    let dv_dx = (rec_i.v[0] as f64 - rec_j.v[0] as f64) * dx[0]
        + (rec_i.v[1] as f64 - rec_j.v[1] as f64) * dx[1]
        + (rec_i.v[2] as f64 - rec_j.v[2] as f64) * dx[2];

    let pi_term = f_i * p_i / (rho_i * rho_i);
    let pj_term = f_j * p_j / (rho_j * rho_j);
    let mut common = pi_term * dwi + pj_term * dwj;

    let v_sig;
    if dv_dx < 0.0 {
        let mu = dv_dx / r;
        v_sig = rec_i.cs as f64 + rec_j.cs as f64 - params.visc_beta * mu;
        // Pairwise viscosity coefficient from the per-particle alpha_v * B
        // products; non-negative for approaching pairs.
        let alpha_ij = 0.5 * (rec_i.alpha_v_bal as f64 + rec_j.alpha_v_bal as f64);
        let nu = -(alpha_ij * mu * v_sig) / (rho_i * rho_j);
        common += 0.5 * nu * (f_i * dwi + f_j * dwj);
    } else {
        v_sig = rec_i.cs as f64 + rec_j.cs as f64;
    }
    acc.v_sig = acc.v_sig.max(v_sig);

    let inv_r = 1.0 / r;
    acc.a[0] -= m_j * common * dx[0] * inv_r;
    acc.a[1] -= m_j * common * dx[1] * inv_r;
    acc.a[2] -= m_j * common * dx[2] * inv_r;

    // Adiabatic work term.
    acc.du_dt += m_j * pi_term * dwi * dv_dx * inv_r;

    // Artificial conduction.
    let p_sum = p_i + p_j;
    if p_sum > 0.0 {
        let alpha_c_ij =
            (p_i * rec_i.alpha_c as f64 + p_j * rec_j.alpha_c as f64) / p_sum;
        let rho_sum = rho_i + rho_j;
        let v_c = dv_dx.abs() * inv_r + (2.0 * (p_i - p_j).abs() / rho_sum).sqrt();
        acc.du_dt += m_j * alpha_c_ij * v_c * (u_i - u_j) * (f_i * dwi + f_j * dwj) / rho_sum;
    }

    // Smoothing-length drift estimate dh/dt = (h/3) div v.
    acc.h_dt -= (hi / (3.0 * rho_i)) * m_j * dv_dx * inv_r * dwi;
}

pub fn force_kernel(
    all: &[SendRecordForce],
    first: usize,
    count: usize,
    out: &mut [RecvRecordForce],
    params: &LoopParams,
) -> u64 {
    debug_assert_eq!(out.len(), count);
    let mut degen = 0;
    for ri in first..first + count {
        let rec = &all[ri];
        let mut acc = ForceAccum::default();
        for j in rec.cf as usize..=rec.cl as usize {
            if j == ri {
                continue;
            }
            force_term(&mut acc, rec, &all[j], params);
        }
        degen += acc.degenerate;
        out[ri - first] = acc.to_record();
    }
    degen
}

// ---------------------------------------------------------------------------
// Sorted pair walk (pseudo-Verlet candidate pruning, CPU pair path)
// ---------------------------------------------------------------------------

/// Mapping from system indices to record indices for one side of a pair task.
#[derive(Debug, Clone, Copy)]
pub struct SideMap {
    pub sys_first: usize,
    pub rec_first: usize,
    pub count: usize,
}

impl SideMap {
    #[inline]
    fn rec_of(&self, sys_idx: u32) -> usize {
        sys_idx as usize - self.sys_first + self.rec_first
    }
}

/// Walk one direction of a pair task: particles of the `active` side gather
/// from candidates of the `other` side found through the sorted projections.
/// `other_shift` is the scalar projection shift of the other side relative to
/// the active one. The `window` callback maps a record index to the gather
/// half-width for that particle. Candidates are distance-filtered by the term
/// functions themselves; they are visited in ascending record index so the
/// result is bit-identical to the double loop.
pub struct PairWalk<'a> {
    pub active_list: &'a SortedList,
    pub other_list: &'a SortedList,
    pub active_map: SideMap,
    pub other_map: SideMap,
    pub other_shift: f64,
}

impl<'a> PairWalk<'a> {
    /// Run the walk; `gather(rec_i, candidate_rec_indices)` performs the
    /// actual accumulation. Returns the number of candidate pairs examined.
    pub fn run<F>(&self, mut half_width: impl FnMut(usize) -> f64, mut gather: F) -> usize
    where
        F: FnMut(usize, &[usize]),
    {
        let mut examined = 0usize;
        let mut cand: Vec<usize> = Vec::with_capacity(64);
        for (k, &sys_i) in self.active_list.idx.iter().enumerate() {
            let rec_i = self.active_map.rec_of(sys_i);
            let p_i = self.active_list.proj[k];
            let w = half_width(rec_i);
            let (lo, hi) = self.other_list.window(p_i - self.other_shift, w);
            examined += hi - lo;
            cand.clear();
            cand.extend(self.other_list.idx[lo..hi].iter().map(|&s| self.other_map.rec_of(s)));
            cand.sort_unstable();
            gather(rec_i, &cand);
        }
        examined
    }
}

// ---------------------------------------------------------------------------
// System-side single-particle density gather (ghost re-iterations)
// ---------------------------------------------------------------------------

/// Recompute the full density-loop accumulators of one particle at a trial
/// smoothing length, gathering over pre-sorted candidate indices. Uses the
/// same arithmetic as the record kernels.
pub fn density_gather_system(
    sys: &ParticleSystem,
    i: usize,
    h: f64,
    candidates: &[u32],
    params: &LoopParams,
) -> DensityAccum {
    let rec_i = SendRecordDensity {
        x: [sys.x[i], sys.y[i], sys.z[i]],
        h: h as f32,
        v: [sys.vx[i], sys.vy[i], sys.vz[i]],
        m: sys.mass[i],
        cf: 0,
        cl: 0,
    };
    let mut acc = DensityAccum::default();
    for &j in candidates {
        let j = j as usize;
        if j == i {
            density_self_term(&mut acc, rec_i.m as f64, rec_i.h as f64, params);
            continue;
        }
        let rec_j = SendRecordDensity {
            x: [sys.x[j], sys.y[j], sys.z[j]],
            h: sys.h[j],
            v: [sys.vx[j], sys.vy[j], sys.vz[j]],
            m: sys.mass[j],
            cf: 0,
            cl: 0,
        };
        density_term(&mut acc, &rec_i, &rec_j, params);
    }
    acc
}
