//! Hierarchical cubic-cell decomposition of the periodic domain.
//!
//! A uniform top-level grid is split recursively (cells holding more than the
//! split threshold get eight daughters) with particle storage permuted so that
//! every cell's range is contiguous. Pair interactions are pruned with
//! per-axis sorted projections (a pseudo-Verlet list).

use crate::error::SolverError;
use crate::system::ParticleSystem;

pub type CellId = u32;

/// The 13 distinct neighbour directions in 3-D: offsets in {-1,0,1}^3 modulo
/// sign, ordered lexicographically with the first non-zero component positive.
pub const PAIR_AXES: [[i32; 3]; 13] = [
    [0, 0, 1],
    [0, 1, -1],
    [0, 1, 0],
    [0, 1, 1],
    [1, -1, -1],
    [1, -1, 0],
    [1, -1, 1],
    [1, 0, -1],
    [1, 0, 0],
    [1, 0, 1],
    [1, 1, -1],
    [1, 1, 0],
    [1, 1, 1],
];

/// Unit vector for a pair axis.
pub fn axis_unit(axis: usize) -> [f64; 3] {
    let a = PAIR_AXES[axis];
    let n = ((a[0] * a[0] + a[1] * a[1] + a[2] * a[2]) as f64).sqrt();
    [a[0] as f64 / n, a[1] as f64 / n, a[2] as f64 / n]
}

fn canonical_axis(delta: [i32; 3]) -> (usize, i32) {
    let first = delta.iter().copied().find(|&d| d != 0).unwrap_or(1);
    let sign = if first > 0 { 1 } else { -1 };
    let canon = [delta[0] * sign, delta[1] * sign, delta[2] * sign];
    let idx = PAIR_AXES
        .iter()
        .position(|a| *a == canon)
        .expect("offset is a valid neighbour direction");
    (idx, sign)
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub depth: u8,
    /// Integer coordinates in the global grid of this depth
    /// (`top_grid * 2^depth` cells per dimension).
    pub coord: [u32; 3],
    pub lo: [f32; 3],
    pub width: f32,
    pub first: usize,
    pub count: usize,
    pub parent: Option<CellId>,
    pub daughters: Option<[CellId; 8]>,
    pub h_max: f32,
}

impl Cell {
    pub fn contains(&self, p: [f32; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.lo[a] + self.width)
    }

    pub fn center(&self) -> [f64; 3] {
        [
            self.lo[0] as f64 + 0.5 * self.width as f64,
            self.lo[1] as f64 + 0.5 * self.width as f64,
            self.lo[2] as f64 + 0.5 * self.width as f64,
        ]
    }
}

#[derive(Debug)]
pub struct CellTree {
    pub cells: Vec<Cell>,
    pub top_grid: usize,
    pub box_side: f32,
    pub top_cells: Vec<CellId>,
    pub min_leaf_width: f32,
    pub max_depth: u8,
}

/// Relative geometry of an adjacent same-depth cell pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeom {
    pub axis: usize,
    /// +1 if cell b lies along the canonical axis direction from a, -1 if
    /// along the opposite direction.
    pub sign: i32,
    /// Add this to b's particle positions to bring them into a's frame
    /// (periodic image correction), in box units.
    pub shift: [f64; 3],
}

/// Index list of one cell sorted by projection on a pair axis.
#[derive(Debug, Clone, Default)]
pub struct SortedList {
    pub idx: Vec<u32>,
    pub proj: Vec<f64>,
}

impl SortedList {
    /// Contiguous slice of entries with projection in
    /// `[center - half_width, center + half_width]`.
    pub fn window(&self, center: f64, half_width: f64) -> (usize, usize) {
        let lo = self.proj.partition_point(|&p| p < center - half_width);
        let hi = self.proj.partition_point(|&p| p <= center + half_width);
        (lo, hi)
    }
}

/// Sorted projections of a cell pair onto the axis joining their centers.
#[derive(Debug)]
pub struct SortList {
    pub axis: usize,
    pub a: SortedList,
    pub b: SortedList,
    /// Scalar added to b's projections to account for the periodic image.
    pub b_shift: f64,
}

pub fn build_tree(
    sys: &mut ParticleSystem,
    top_grid: usize,
    split_threshold: usize,
) -> Result<CellTree, SolverError> {
    if top_grid < 1 {
        return Err(SolverError::Config("top_grid must be at least 1".into()));
    }
    if split_threshold < 1 {
        return Err(SolverError::Config("split_threshold must be at least 1".into()));
    }
    let n = sys.len();
    let l = sys.box_side;
    let top_w = l / top_grid as f32;

    for i in 0..n {
        sys.x[i] = ParticleSystem::wrap(sys.x[i], l);
        sys.y[i] = ParticleSystem::wrap(sys.y[i], l);
        sys.z[i] = ParticleSystem::wrap(sys.z[i], l);
    }

    let cell_of = |x: f32| -> usize { ((x / top_w) as usize).min(top_grid - 1) };
    let top_index = |i: usize| -> usize {
        cell_of(sys.x[i]) + top_grid * (cell_of(sys.y[i]) + top_grid * cell_of(sys.z[i]))
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&p| top_index(p));

    let mut tree = CellTree {
        cells: Vec::new(),
        top_grid,
        box_side: l,
        top_cells: Vec::new(),
        min_leaf_width: top_w,
        max_depth: 0,
    };

    // Top cells in grid order, each holding its contiguous slice of `order`.
    let mut starts = vec![0usize; top_grid * top_grid * top_grid + 1];
    for &p in &order {
        starts[top_index(p) + 1] += 1;
    }
    for i in 1..starts.len() {
        starts[i] += starts[i - 1];
    }
    for iz in 0..top_grid {
        for iy in 0..top_grid {
            for ix in 0..top_grid {
                let lin = ix + top_grid * (iy + top_grid * iz);
                let id = tree.cells.len() as CellId;
                tree.cells.push(Cell {
                    depth: 0,
                    coord: [ix as u32, iy as u32, iz as u32],
                    lo: [ix as f32 * top_w, iy as f32 * top_w, iz as f32 * top_w],
                    width: top_w,
                    first: starts[lin],
                    count: starts[lin + 1] - starts[lin],
                    parent: None,
                    daughters: None,
                    h_max: 0.0,
                });
                tree.top_cells.push(id);
            }
        }
    }

    let tops = tree.top_cells.clone();
    for id in tops {
        split_recursive(&mut tree, sys, &mut order, id, split_threshold);
    }

    sys.apply_permutation(&order);
    tree.refresh_h_max(sys);
    tree.min_leaf_width = top_w / (1u32 << tree.max_depth) as f32;
    Ok(tree)
}

fn split_recursive(
    tree: &mut CellTree,
    sys: &ParticleSystem,
    order: &mut [usize],
    id: CellId,
    threshold: usize,
) {
    let (first, count, lo, width, depth, coord) = {
        let c = &tree.cells[id as usize];
        (c.first, c.count, c.lo, c.width, c.depth, c.coord)
    };
    if count <= threshold {
        return;
    }
    let half = width * 0.5;
    let cx = lo[0] + half;
    let cy = lo[1] + half;
    let cz = lo[2] + half;
    let octant = |p: usize| -> usize {
        (sys.x[p] >= cx) as usize | (((sys.y[p] >= cy) as usize) << 1) | (((sys.z[p] >= cz) as usize) << 2)
    };
    let slice = &mut order[first..first + count];
    slice.sort_by_key(|&p| octant(p));

    let mut oct_start = [0usize; 9];
    for &p in slice.iter() {
        oct_start[octant(p) + 1] += 1;
    }
    for i in 1..9 {
        oct_start[i] += oct_start[i - 1];
    }

    let mut daughters = [0 as CellId; 8];
    for oct in 0..8 {
        let bx = (oct & 1) as u32;
        let by = ((oct >> 1) & 1) as u32;
        let bz = ((oct >> 2) & 1) as u32;
        let did = tree.cells.len() as CellId;
        daughters[oct] = did;
        tree.cells.push(Cell {
            depth: depth + 1,
            coord: [2 * coord[0] + bx, 2 * coord[1] + by, 2 * coord[2] + bz],
            lo: [
                lo[0] + bx as f32 * half,
                lo[1] + by as f32 * half,
                lo[2] + bz as f32 * half,
            ],
            width: half,
            first: first + oct_start[oct],
            count: oct_start[oct + 1] - oct_start[oct],
            parent: Some(id),
            daughters: None,
            h_max: 0.0,
        });
    }
    tree.cells[id as usize].daughters = Some(daughters);
    tree.max_depth = tree.max_depth.max(depth + 1);
    for d in daughters {
        split_recursive(tree, sys, order, d, threshold);
    }
}

impl CellTree {
    /// Recompute h_max bottom-up from current smoothing lengths. Called
    /// lazily before interaction levels are queried again.
    pub fn refresh_h_max(&mut self, sys: &ParticleSystem) {
        for i in (0..self.cells.len()).rev() {
            let hm = if let Some(ds) = self.cells[i].daughters {
                ds.iter().map(|&d| self.cells[d as usize].h_max).fold(0.0f32, f32::max)
            } else {
                let c = &self.cells[i];
                sys.h[c.first..c.first + c.count]
                    .iter()
                    .fold(0.0f32, |m, &h| m.max(h))
            };
            self.cells[i].h_max = hm;
        }
    }

    /// True if interactions for the cell's particles fit within the cell:
    /// the kernel cut-off of the largest particle does not exceed the width.
    #[inline]
    pub fn fits(&self, id: CellId, gamma_k: f64) -> bool {
        let c = &self.cells[id as usize];
        gamma_k * c.h_max as f64 <= c.width as f64
    }

    /// Depth of the deepest ancestor-or-self at which the kernel cut-off fits
    /// within the cell width.
    pub fn interaction_level(&self, id: CellId, gamma_k: f64) -> Result<u8, SolverError> {
        let mut cur = id;
        loop {
            if self.fits(cur, gamma_k) {
                return Ok(self.cells[cur as usize].depth);
            }
            match self.cells[cur as usize].parent {
                Some(p) => cur = p,
                None => {
                    return Err(SolverError::Config(format!(
                        "kernel support {:.4} exceeds the top-level cell width {:.4}; \
                         the domain decomposition is too coarse",
                        gamma_k * self.cells[cur as usize].h_max as f64,
                        self.cells[cur as usize].width
                    )))
                }
            }
        }
    }

    /// Signed wrapped coordinate delta between two same-depth cells, or None
    /// if they are not adjacent (face, edge or corner, honouring wrap).
    pub fn neighbour_delta(&self, a: CellId, b: CellId) -> Option<[i32; 3]> {
        let ca = &self.cells[a as usize];
        let cb = &self.cells[b as usize];
        if ca.depth != cb.depth || a == b {
            return None;
        }
        let n = (self.top_grid as i64) << ca.depth as i64;
        let mut delta = [0i32; 3];
        for ax in 0..3 {
            let mut d = cb.coord[ax] as i64 - ca.coord[ax] as i64;
            d = d.rem_euclid(n);
            if d > n / 2 {
                d -= n;
            }
            if d.abs() > 1 {
                return None;
            }
            delta[ax] = d as i32;
        }
        if delta == [0, 0, 0] {
            None
        } else {
            Some(delta)
        }
    }

    /// Geometry of an adjacent pair: canonical axis, direction sign, and the
    /// periodic image shift to apply to b.
    pub fn pair_geometry(&self, a: CellId, b: CellId) -> Option<PairGeom> {
        let delta = self.neighbour_delta(a, b)?;
        let (axis, sign) = canonical_axis(delta);
        let ca = &self.cells[a as usize];
        let cb = &self.cells[b as usize];
        let n = (self.top_grid as i64) << ca.depth as i64;
        let l = self.box_side as f64;
        let mut shift = [0.0f64; 3];
        for ax in 0..3 {
            let raw = cb.coord[ax] as i64 - ca.coord[ax] as i64;
            let mut wrapped = raw.rem_euclid(n);
            if wrapped > n / 2 {
                wrapped -= n;
            }
            shift[ax] = ((wrapped - raw) / n) as f64 * l;
        }
        Some(PairGeom { axis, sign, shift })
    }

    /// Build the sorted projection list of one cell along a canonical axis.
    pub fn sort_cell_axis(&self, sys: &ParticleSystem, id: CellId, axis: usize) -> SortedList {
        let c = &self.cells[id as usize];
        let u = axis_unit(axis);
        let mut entries: Vec<(f64, u32)> = (c.first..c.first + c.count)
            .map(|i| {
                let p = sys.x[i] as f64 * u[0] + sys.y[i] as f64 * u[1] + sys.z[i] as f64 * u[2];
                (p, i as u32)
            })
            .collect();
        entries.sort_by(|l, r| {
            l.0.total_cmp(&r.0)
                .then_with(|| sys.ids[l.1 as usize].cmp(&sys.ids[r.1 as usize]))
        });
        SortedList {
            idx: entries.iter().map(|e| e.1).collect(),
            proj: entries.iter().map(|e| e.0).collect(),
        }
    }

    /// Sort a pair of adjacent cells along the axis joining their centers.
    /// Projections are taken on the a->b unit direction; b's carry the
    /// periodic image shift.
    pub fn sort_pair(
        &self,
        sys: &ParticleSystem,
        a: CellId,
        b: CellId,
    ) -> Result<SortList, SolverError> {
        let geom = self.pair_geometry(a, b).ok_or_else(|| {
            SolverError::Internal(format!("sort_pair called on non-adjacent cells {a} and {b}"))
        })?;
        let u = axis_unit(geom.axis);
        let s = geom.sign as f64;
        let mut la = self.sort_cell_axis(sys, a, geom.axis);
        let mut lb = self.sort_cell_axis(sys, b, geom.axis);
        let b_shift = s * (geom.shift[0] * u[0] + geom.shift[1] * u[1] + geom.shift[2] * u[2]);
        if s < 0.0 {
            // Projection onto the actual a->b direction flips the order.
            for list in [&mut la, &mut lb] {
                list.idx.reverse();
                list.proj.reverse();
                list.proj.iter_mut().for_each(|p| *p = -*p);
            }
        }
        Ok(SortList { axis: geom.axis, a: la, b: lb, b_shift })
    }

    /// Cells per level, for the run log.
    pub fn level_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.max_depth as usize + 1];
        for c in &self.cells {
            hist[c.depth as usize] += 1;
        }
        hist
    }

    /// Collect indices of particles whose cells may intersect the sphere
    /// around `center` with `radius` (periodic). Exact distance filtering is
    /// left to the caller; results are sorted ascending.
    ///
    /// Cell membership is frozen at build time while positions keep
    /// drifting, so the box test carries half a leaf width of slack — the
    /// rebuild policy keeps accumulated drift well below that.
    pub fn candidates_within(&self, center: [f64; 3], radius: f64, out: &mut Vec<u32>) {
        out.clear();
        let l = self.box_side as f64;
        let radius = radius + 0.5 * self.min_leaf_width as f64;
        for &top in &self.top_cells {
            self.gather_cell_candidates(top, center, radius, l, out);
        }
        out.sort_unstable();
    }

    fn gather_cell_candidates(
        &self,
        id: CellId,
        center: [f64; 3],
        radius: f64,
        l: f64,
        out: &mut Vec<u32>,
    ) {
        let c = &self.cells[id as usize];
        if c.count == 0 {
            return;
        }
        let mut d2 = 0.0f64;
        for ax in 0..3 {
            let lo = c.lo[ax] as f64;
            let hi = lo + c.width as f64;
            let p = center[ax];
            // Distance from p to [lo, hi] under the minimum image.
            let mut best = f64::INFINITY;
            for img in [-l, 0.0, l] {
                let q = p + img;
                let d = if q < lo {
                    lo - q
                } else if q > hi {
                    q - hi
                } else {
                    0.0
                };
                best = best.min(d);
            }
            d2 += best * best;
        }
        if d2 > radius * radius {
            return;
        }
        if let Some(ds) = c.daughters {
            for d in ds {
                self.gather_cell_candidates(d, center, radius, l, out);
            }
        } else {
            out.extend((c.first..c.first + c.count).map(|i| i as u32));
        }
    }
}

/// Drift positions of a contiguous range by dt and wrap them. Returns the
/// largest single-particle displacement, as an upper bound for the rebuild
/// trigger.
pub fn drift_range(sys: &mut ParticleSystem, first: usize, count: usize, dt: f64) -> f64 {
    let l = sys.box_side;
    let mut max_disp2 = 0.0f64;
    for i in first..first + count {
        let dx = sys.vx[i] as f64 * dt;
        let dy = sys.vy[i] as f64 * dt;
        let dz = sys.vz[i] as f64 * dt;
        max_disp2 = max_disp2.max(dx * dx + dy * dy + dz * dz);
        sys.x[i] = ParticleSystem::wrap(sys.x[i] + dx as f32, l);
        sys.y[i] = ParticleSystem::wrap(sys.y[i] + dy as f32, l);
        sys.z[i] = ParticleSystem::wrap(sys.z[i] + dz as f32, l);
    }
    max_disp2.sqrt()
}

/// Interaction decomposition: the bottomed-out self and pair units on which
/// loop computations (or pack tasks) actually run.
#[derive(Debug, Default)]
pub struct Decomposition {
    pub self_units: Vec<CellId>,
    pub pair_units: Vec<PairUnit>,
    /// Per top cell: indices into self_units and internal pair_units.
    pub top_self_units: Vec<Vec<u32>>,
    pub top_internal_pairs: Vec<Vec<u32>>,
    /// Cross-top pairs: (top a, top b, pair unit indices).
    pub top_cross_pairs: Vec<(CellId, CellId, Vec<u32>)>,
    /// Per top cell: (cell, axis) sorted lists its sort task must provide.
    pub sort_lists: Vec<Vec<(CellId, usize)>>,
    pub max_unit_count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PairUnit {
    pub a: CellId,
    pub b: CellId,
    pub geom: PairGeom,
}

/// Enumerate the interaction units of the tree. Requires a top grid of at
/// least 3 cells per dimension so that periodic neighbour relations are
/// unambiguous.
pub fn decompose(tree: &CellTree, gamma_k: f64) -> Result<Decomposition, SolverError> {
    if tree.top_grid < 3 {
        return Err(SolverError::Config(format!(
            "pair enumeration requires a top grid of at least 3 per dimension, got {}",
            tree.top_grid
        )));
    }
    for &t in &tree.top_cells {
        if tree.cells[t as usize].count > 0 && !tree.fits(t, gamma_k) {
            return Err(SolverError::Config(format!(
                "kernel support {:.5} exceeds top-level cell width {:.5}",
                gamma_k * tree.cells[t as usize].h_max as f64,
                tree.cells[t as usize].width
            )));
        }
    }

    let n_top = tree.top_cells.len();
    let mut dec = Decomposition {
        top_self_units: vec![Vec::new(); n_top],
        top_internal_pairs: vec![Vec::new(); n_top],
        sort_lists: vec![Vec::new(); n_top],
        ..Default::default()
    };

    let top_of = |tree: &CellTree, mut id: CellId| -> usize {
        while let Some(p) = tree.cells[id as usize].parent {
            id = p;
        }
        id as usize
    };

    for (ti, &t) in tree.top_cells.iter().enumerate() {
        if tree.cells[t as usize].count == 0 {
            continue;
        }
        let mut selfs = Vec::new();
        let mut pairs = Vec::new();
        recurse_self(tree, gamma_k, t, &mut selfs, &mut pairs);
        for c in selfs {
            dec.top_self_units[ti].push(dec.self_units.len() as u32);
            dec.self_units.push(c);
        }
        for p in pairs {
            dec.top_internal_pairs[ti].push(dec.pair_units.len() as u32);
            dec.pair_units.push(p);
        }
    }

    // Unordered adjacent top pairs.
    let g = tree.top_grid as i64;
    for (ti, &t) in tree.top_cells.iter().enumerate() {
        if tree.cells[t as usize].count == 0 {
            continue;
        }
        let c = &tree.cells[t as usize];
        for &off in NEIGHBOUR_OFFSETS_HALF.iter() {
            let nb = [
                (c.coord[0] as i64 + off[0] as i64).rem_euclid(g) as u32,
                (c.coord[1] as i64 + off[1] as i64).rem_euclid(g) as u32,
                (c.coord[2] as i64 + off[2] as i64).rem_euclid(g) as u32,
            ];
            let lin = nb[0] as usize + tree.top_grid * (nb[1] as usize + tree.top_grid * nb[2] as usize);
            let other = tree.top_cells[lin];
            if tree.cells[other as usize].count == 0 || other == t {
                continue;
            }
            let mut pairs = Vec::new();
            recurse_pair(tree, gamma_k, t, other, &mut pairs);
            let mut idxs = Vec::new();
            for p in pairs {
                idxs.push(dec.pair_units.len() as u32);
                dec.pair_units.push(p);
            }
            dec.top_cross_pairs.push((t, other, idxs));
            let _ = ti;
        }
    }

    // Sort lists needed per top cell: one entry per (cell, axis) that appears
    // on either side of a pair unit.
    let mut seen: std::collections::HashSet<(CellId, usize)> = Default::default();
    for pu in &dec.pair_units {
        for cell in [pu.a, pu.b] {
            if seen.insert((cell, pu.geom.axis)) {
                let t = top_of(tree, cell);
                dec.sort_lists[t].push((cell, pu.geom.axis));
            }
        }
    }
    for lists in dec.sort_lists.iter_mut() {
        lists.sort_unstable();
    }

    dec.max_unit_count = dec
        .self_units
        .iter()
        .map(|&c| tree.cells[c as usize].count)
        .chain(dec.pair_units.iter().map(|p| {
            tree.cells[p.a as usize].count + tree.cells[p.b as usize].count
        }))
        .max()
        .unwrap_or(0);
    Ok(dec)
}

/// Offsets covering half of the 26 neighbours so each unordered pair is
/// visited exactly once (the canonical axis directions).
const NEIGHBOUR_OFFSETS_HALF: [[i32; 3]; 13] = PAIR_AXES;

fn daughters_fit(tree: &CellTree, id: CellId, gamma_k: f64) -> bool {
    match tree.cells[id as usize].daughters {
        Some(ds) => ds.iter().all(|&d| tree.fits(d, gamma_k)),
        None => false,
    }
}

fn recurse_self(
    tree: &CellTree,
    gamma_k: f64,
    id: CellId,
    selfs: &mut Vec<CellId>,
    pairs: &mut Vec<PairUnit>,
) {
    if tree.cells[id as usize].count == 0 {
        return;
    }
    if daughters_fit(tree, id, gamma_k) {
        let ds = tree.cells[id as usize].daughters.unwrap();
        for d in ds {
            recurse_self(tree, gamma_k, d, selfs, pairs);
        }
        for i in 0..8 {
            for j in (i + 1)..8 {
                recurse_pair(tree, gamma_k, ds[i], ds[j], pairs);
            }
        }
    } else {
        selfs.push(id);
    }
}

fn recurse_pair(tree: &CellTree, gamma_k: f64, a: CellId, b: CellId, pairs: &mut Vec<PairUnit>) {
    if tree.cells[a as usize].count == 0 || tree.cells[b as usize].count == 0 {
        return;
    }
    if daughters_fit(tree, a, gamma_k) && daughters_fit(tree, b, gamma_k) {
        let da = tree.cells[a as usize].daughters.unwrap();
        let db = tree.cells[b as usize].daughters.unwrap();
        for &ca in &da {
            for &cb in &db {
                if tree.neighbour_delta(ca, cb).is_some() {
                    recurse_pair(tree, gamma_k, ca, cb, pairs);
                }
            }
        }
    } else if let Some(geom) = tree.pair_geometry(a, b) {
        pairs.push(PairUnit { a, b, geom });
    }
}
