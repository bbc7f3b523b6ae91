//! Hierarchical quadrilateral meshes with local refinement.
//!
//! Cells are stored as a forest of quadtrees over a structured root lattice
//! (a single rectangle or a union of axis-aligned rectangles sharing the same
//! lattice). Active cells are the leaves. Refinement replaces a cell by its
//! four children and transitively refines neighbors until the mesh is
//! 1-irregular again (level difference across any face at most one), which is
//! the smoothing rule assumed by the hanging-node constraints in `fe`.
//!
//! Vertex and cell ids are stable: refinement only appends. All cells are
//! axis-aligned rectangles, so the bilinear geometry mapping of a cell is
//! affine and its inverse is exact.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

/// Sides of a cell in counterclockwise order.
pub const SIDE_S: usize = 0;
pub const SIDE_E: usize = 1;
pub const SIDE_N: usize = 2;
pub const SIDE_W: usize = 3;

/// Child slots in counterclockwise order starting at the SW quadrant.
const CHILD_SW: usize = 0;
const CHILD_SE: usize = 1;
const CHILD_NE: usize = 2;
const CHILD_NW: usize = 3;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("degenerate bounds: rectangle has zero area")]
    DegenerateBounds,
    #[error("subdivision counts must be at least 1")]
    EmptySubdivision,
    #[error("rectangle {0} does not fit the common lattice")]
    OffLattice(usize),
    #[error("rectangles overlap on the lattice")]
    OverlappingRects,
    #[error("point ({0}, {1}) is outside the mesh domain")]
    PointOutside(f64, f64),
    #[error("cell {0} is not active")]
    NotActive(usize),
}

/// Axis-aligned rectangle given by its lower-left and upper-right corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    pub fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        Rect { lo, hi }
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }
}

/// One quadrilateral cell of the forest.
#[derive(Debug, Clone)]
pub struct Cell {
    /// Vertex ids, counterclockwise: SW, SE, NE, NW.
    pub verts: [usize; 4],
    /// Refinement depth; root cells are level 0.
    pub level: u32,
    pub parent: Option<usize>,
    /// Children in SW, SE, NE, NW order; `None` for active (leaf) cells.
    pub children: Option<[usize; 4]>,
}

/// Root lattice bookkeeping: maps lattice coordinates to root cell ids.
#[derive(Debug, Clone)]
struct RootGrid {
    x0: f64,
    y0: f64,
    hx: f64,
    hy: f64,
    nx: usize,
    ny: usize,
    /// Row-major `ny x nx`; `usize::MAX` marks lattice holes (outside the union).
    cells: Vec<usize>,
}

impl RootGrid {
    fn root_at(&self, i: i64, j: i64) -> Option<usize> {
        if i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 {
            return None;
        }
        let c = self.cells[j as usize * self.nx + i as usize];
        (c != usize::MAX).then_some(c)
    }
}

/// Deduplicating index of points with a small geometric tolerance.
struct PointIndex {
    inv_bin: f64,
    tol: f64,
    bins: HashMap<(i64, i64), Vec<usize>>,
}

impl PointIndex {
    fn new(extent: f64) -> Self {
        let tol = 1e-9 * extent.max(1e-300);
        PointIndex {
            inv_bin: 1.0 / (4.0 * tol),
            tol,
            bins: HashMap::new(),
        }
    }

    fn key(&self, p: [f64; 2]) -> (i64, i64) {
        (
            (p[0] * self.inv_bin).floor() as i64,
            (p[1] * self.inv_bin).floor() as i64,
        )
    }

    fn find(&self, p: [f64; 2], verts: &[[f64; 2]]) -> Option<usize> {
        let (ki, kj) = self.key(p);
        for di in -1..=1 {
            for dj in -1..=1 {
                if let Some(list) = self.bins.get(&(ki + di, kj + dj)) {
                    for &v in list {
                        let q = verts[v];
                        if (q[0] - p[0]).abs() <= self.tol && (q[1] - p[1]).abs() <= self.tol {
                            return Some(v);
                        }
                    }
                }
            }
        }
        None
    }

    fn insert(&mut self, p: [f64; 2], id: usize) {
        self.bins.entry(self.key(p)).or_default().push(id);
    }

    fn find_or_insert(&mut self, p: [f64; 2], verts: &mut Vec<[f64; 2]>) -> usize {
        if let Some(v) = self.find(p, verts) {
            return v;
        }
        let id = verts.len();
        verts.push(p);
        self.insert(p, id);
        id
    }
}

/// Interpolates between `a` and `b`, exact at the endpoints.
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

/// Hierarchical 2D quadrilateral triangulation with 1-irregular hanging nodes.
#[derive(Debug, Clone)]
pub struct Mesh {
    verts: Vec<[f64; 2]>,
    cells: Vec<Cell>,
    roots: RootGrid,
    extent: f64,
}

/// What lies across a face of an active cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaceNeighbor {
    Boundary,
    /// Active neighbor of the same refinement level.
    Same(usize),
    /// Active neighbor one level coarser; this cell's face hangs on it.
    Coarser(usize),
    /// Two active neighbors one level finer, in ascending coordinate order.
    Finer([usize; 2]),
}

impl Mesh {
    /// Builds a uniform structured mesh of a single rectangle.
    pub fn rectangle(bounds: Rect, nx: usize, ny: usize) -> Result<Arc<Mesh>, MeshError> {
        if nx == 0 || ny == 0 {
            return Err(MeshError::EmptySubdivision);
        }
        if bounds.hi[0] <= bounds.lo[0] || bounds.hi[1] <= bounds.lo[1] {
            return Err(MeshError::DegenerateBounds);
        }
        let hx = (bounds.hi[0] - bounds.lo[0]) / nx as f64;
        let hy = (bounds.hi[1] - bounds.lo[1]) / ny as f64;
        Mesh::from_lattice(bounds.lo, hx, hy, nx, ny, |_, _| true)
    }

    /// Builds a conforming mesh of a union of rectangles on a common lattice
    /// with square cells of side `h`. Every rectangle corner must lie on the
    /// lattice anchored at the lower-left corner of the union's bounding box.
    pub fn union_of_rects(rects: &[Rect], h: f64) -> Result<Arc<Mesh>, MeshError> {
        if rects.is_empty() || h <= 0.0 {
            return Err(MeshError::DegenerateBounds);
        }
        let x0 = rects.iter().map(|r| r.lo[0]).fold(f64::INFINITY, f64::min);
        let y0 = rects.iter().map(|r| r.lo[1]).fold(f64::INFINITY, f64::min);
        let x1 = rects.iter().map(|r| r.hi[0]).fold(f64::NEG_INFINITY, f64::max);
        let y1 = rects.iter().map(|r| r.hi[1]).fold(f64::NEG_INFINITY, f64::max);
        let nx = ((x1 - x0) / h).round() as usize;
        let ny = ((y1 - y0) / h).round() as usize;
        if nx == 0 || ny == 0 {
            return Err(MeshError::DegenerateBounds);
        }
        // Index ranges per rectangle, validated against the lattice.
        let mut inside = vec![false; nx * ny];
        for (k, r) in rects.iter().enumerate() {
            if r.hi[0] <= r.lo[0] || r.hi[1] <= r.lo[1] {
                return Err(MeshError::DegenerateBounds);
            }
            let fi0 = (r.lo[0] - x0) / h;
            let fj0 = (r.lo[1] - y0) / h;
            let fi1 = (r.hi[0] - x0) / h;
            let fj1 = (r.hi[1] - y0) / h;
            for (f, _name) in [(fi0, "i0"), (fj0, "j0"), (fi1, "i1"), (fj1, "j1")] {
                if (f - f.round()).abs() > 1e-9 {
                    return Err(MeshError::OffLattice(k));
                }
            }
            let (i0, j0, i1, j1) = (
                fi0.round() as usize,
                fj0.round() as usize,
                fi1.round() as usize,
                fj1.round() as usize,
            );
            for j in j0..j1 {
                for i in i0..i1 {
                    if inside[j * nx + i] {
                        return Err(MeshError::OverlappingRects);
                    }
                    inside[j * nx + i] = true;
                }
            }
        }
        Mesh::from_lattice([x0, y0], h, h, nx, ny, |i, j| inside[j * nx + i])
    }

    fn from_lattice(
        origin: [f64; 2],
        hx: f64,
        hy: f64,
        nx: usize,
        ny: usize,
        inside: impl Fn(usize, usize) -> bool,
    ) -> Result<Arc<Mesh>, MeshError> {
        let extent = (hx * nx as f64).max(hy * ny as f64);
        let mut verts = Vec::new();
        let mut index = PointIndex::new(extent);
        let mut vid = vec![usize::MAX; (nx + 1) * (ny + 1)];
        // Lattice vertex coordinates: identical arithmetic for every cell that
        // touches a vertex, so dedup by coordinates is exact here.
        for j in 0..=ny {
            for i in 0..=nx {
                let p = [
                    lerp(origin[0], origin[0] + hx * nx as f64, i as f64 / nx as f64),
                    lerp(origin[1], origin[1] + hy * ny as f64, j as f64 / ny as f64),
                ];
                vid[j * (nx + 1) + i] = index.find_or_insert(p, &mut verts);
            }
        }
        let mut cells = Vec::new();
        let mut root_cells = vec![usize::MAX; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                if !inside(i, j) {
                    continue;
                }
                let v = |ii: usize, jj: usize| vid[jj * (nx + 1) + ii];
                root_cells[j * nx + i] = cells.len();
                cells.push(Cell {
                    verts: [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)],
                    level: 0,
                    parent: None,
                    children: None,
                });
            }
        }
        if cells.is_empty() {
            return Err(MeshError::DegenerateBounds);
        }
        Ok(Arc::new(Mesh {
            verts,
            cells,
            roots: RootGrid {
                x0: origin[0],
                y0: origin[1],
                hx,
                hy,
                nx,
                ny,
                cells: root_cells,
            },
            extent,
        }))
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_active_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.children.is_none()).count()
    }

    pub fn vertex(&self, v: usize) -> [f64; 2] {
        self.verts[v]
    }

    pub fn n_vertices(&self) -> usize {
        self.verts.len()
    }

    pub fn cell(&self, id: usize) -> &Cell {
        &self.cells[id]
    }

    pub fn is_active(&self, id: usize) -> bool {
        self.cells[id].children.is_none()
    }

    /// Active cell ids in ascending order.
    pub fn active_cells(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&c| self.is_active(c)).collect()
    }

    /// Lower-left and upper-right corners of a cell.
    pub fn cell_bounds(&self, id: usize) -> Rect {
        let c = &self.cells[id];
        Rect::new(self.verts[c.verts[0]], self.verts[c.verts[2]])
    }

    /// Cell diameter `h_K` (the diagonal of the rectangle).
    pub fn cell_diameter(&self, id: usize) -> f64 {
        let b = self.cell_bounds(id);
        let dx = b.hi[0] - b.lo[0];
        let dy = b.hi[1] - b.lo[1];
        (dx * dx + dy * dy).sqrt()
    }

    pub fn cell_area(&self, id: usize) -> f64 {
        self.cell_bounds(id).area()
    }

    /// Total area of the active cells.
    pub fn total_area(&self) -> f64 {
        self.active_cells().iter().map(|&c| self.cell_area(c)).sum()
    }

    /// Maps reference coordinates in `[0,1]^2` to physical coordinates.
    pub fn map_to_physical(&self, id: usize, xi: [f64; 2]) -> [f64; 2] {
        let b = self.cell_bounds(id);
        [lerp(b.lo[0], b.hi[0], xi[0]), lerp(b.lo[1], b.hi[1], xi[1])]
    }

    /// Child slot of `id` within its parent, if any.
    fn child_index(&self, id: usize) -> Option<usize> {
        let p = self.cells[id].parent?;
        let ch = self.cells[p].children.expect("parent must have children");
        Some(ch.iter().position(|&c| c == id).expect("cell not in parent"))
    }

    fn root_lattice_index(&self, id: usize) -> (i64, i64) {
        let b = self.cell_bounds(id);
        let i = ((b.lo[0] - self.roots.x0) / self.roots.hx).round() as i64;
        let j = ((b.lo[1] - self.roots.y0) / self.roots.hy).round() as i64;
        (i, j)
    }

    /// Same-level (possibly inactive) or one-coarser neighbor across `side`.
    pub fn neighbor_same_or_coarser(&self, id: usize, side: usize) -> Option<usize> {
        const SIBLING: [[Option<usize>; 4]; 4] = [
            // child SW: S, E, N, W
            [None, Some(CHILD_SE), Some(CHILD_NW), None],
            // child SE
            [None, None, Some(CHILD_NE), Some(CHILD_SW)],
            // child NE
            [Some(CHILD_SE), None, None, Some(CHILD_NW)],
            // child NW
            [Some(CHILD_SW), Some(CHILD_NE), None, None],
        ];
        const MIRROR: [[usize; 4]; 4] = [
            // crossing S, E, N, W from child SW/SE/NE/NW
            [CHILD_NW, CHILD_SE, CHILD_SE, CHILD_SE],
            [CHILD_NE, CHILD_SW, CHILD_NE, CHILD_SW],
            [CHILD_SE, CHILD_NW, CHILD_SE, CHILD_NW],
            [CHILD_SW, CHILD_NE, CHILD_SW, CHILD_NE],
        ];
        match self.cells[id].parent {
            Some(p) => {
                let ci = self.child_index(id).unwrap();
                if let Some(sib) = SIBLING[ci][side] {
                    return Some(self.cells[p].children.unwrap()[sib]);
                }
                let pn = self.neighbor_same_or_coarser(p, side)?;
                match self.cells[pn].children {
                    Some(ch) => Some(ch[MIRROR[ci][side]]),
                    None => Some(pn),
                }
            }
            None => {
                let (i, j) = self.root_lattice_index(id);
                let (di, dj) = match side {
                    SIDE_S => (0, -1),
                    SIDE_E => (1, 0),
                    SIDE_N => (0, 1),
                    SIDE_W => (-1, 0),
                    _ => unreachable!(),
                };
                self.roots.root_at(i + di, j + dj)
            }
        }
    }

    /// The active cells across a face of an active cell.
    pub fn face_neighbor(&self, id: usize, side: usize) -> FaceNeighbor {
        debug_assert!(self.is_active(id));
        match self.neighbor_same_or_coarser(id, side) {
            None => FaceNeighbor::Boundary,
            Some(n) => {
                if self.is_active(n) {
                    if self.cells[n].level < self.cells[id].level {
                        FaceNeighbor::Coarser(n)
                    } else {
                        FaceNeighbor::Same(n)
                    }
                } else {
                    // Children adjacent to the shared face, in ascending
                    // coordinate order along the face.
                    let ch = self.cells[n].children.unwrap();
                    let pair = match side {
                        SIDE_S => [ch[CHILD_NW], ch[CHILD_NE]],
                        SIDE_E => [ch[CHILD_SW], ch[CHILD_NW]],
                        SIDE_N => [ch[CHILD_SW], ch[CHILD_SE]],
                        SIDE_W => [ch[CHILD_SE], ch[CHILD_NE]],
                        _ => unreachable!(),
                    };
                    FaceNeighbor::Finer(pair)
                }
            }
        }
    }

    /// Checks the 1-irregularity invariant over all active faces.
    pub fn is_one_irregular(&self) -> bool {
        for c in self.active_cells() {
            for side in 0..4 {
                match self.face_neighbor(c, side) {
                    FaceNeighbor::Finer(pair) => {
                        for n in pair {
                            if !self.is_active(n) {
                                return false;
                            }
                        }
                    }
                    FaceNeighbor::Coarser(n) | FaceNeighbor::Same(n) => {
                        if self.cells[n].level.abs_diff(self.cells[c].level) > 1 {
                            return false;
                        }
                    }
                    FaceNeighbor::Boundary => {}
                }
            }
        }
        true
    }

    fn split(&mut self, id: usize, index: &mut PointIndex) {
        debug_assert!(self.is_active(id));
        let b = self.cell_bounds(id);
        let [v_sw, v_se, v_ne, v_nw] = self.cells[id].verts;
        let mid = |a: [f64; 2], b: [f64; 2]| [lerp(a[0], b[0], 0.5), lerp(a[1], b[1], 0.5)];
        let p_s = mid(self.verts[v_sw], self.verts[v_se]);
        let p_e = mid(self.verts[v_se], self.verts[v_ne]);
        let p_n = mid(self.verts[v_nw], self.verts[v_ne]);
        let p_w = mid(self.verts[v_sw], self.verts[v_nw]);
        let p_c = [lerp(b.lo[0], b.hi[0], 0.5), lerp(b.lo[1], b.hi[1], 0.5)];
        let m_s = index.find_or_insert(p_s, &mut self.verts);
        let m_e = index.find_or_insert(p_e, &mut self.verts);
        let m_n = index.find_or_insert(p_n, &mut self.verts);
        let m_w = index.find_or_insert(p_w, &mut self.verts);
        let m_c = index.find_or_insert(p_c, &mut self.verts);
        let level = self.cells[id].level + 1;
        let base = self.cells.len();
        let children = [
            Cell { verts: [v_sw, m_s, m_c, m_w], level, parent: Some(id), children: None },
            Cell { verts: [m_s, v_se, m_e, m_c], level, parent: Some(id), children: None },
            Cell { verts: [m_c, m_e, v_ne, m_n], level, parent: Some(id), children: None },
            Cell { verts: [m_w, m_c, m_n, v_nw], level, parent: Some(id), children: None },
        ];
        self.cells.extend(children);
        self.cells[id].children = Some([base, base + 1, base + 2, base + 3]);
    }

    /// Refines the marked active cells, then refines transitively until the
    /// mesh is 1-irregular again. An empty mark set returns the mesh unchanged.
    pub fn refine(self: &Arc<Mesh>, marked: &[usize]) -> Result<Arc<Mesh>, MeshError> {
        let mut marks: Vec<usize> = marked.to_vec();
        marks.sort_unstable();
        marks.dedup();
        for &c in &marks {
            if c >= self.cells.len() || !self.is_active(c) {
                return Err(MeshError::NotActive(c));
            }
        }
        if marks.is_empty() {
            return Ok(Arc::clone(self));
        }
        let mut mesh = (**self).clone();
        let mut index = PointIndex::new(mesh.extent);
        for (v, &p) in mesh.verts.iter().enumerate() {
            index.insert(p, v);
        }
        // Depth-first worklist; coarser face neighbors are split first so a
        // split never creates a level difference above one.
        let mut stack: Vec<usize> = marks.into_iter().rev().collect();
        while let Some(c) = stack.pop() {
            if !mesh.is_active(c) {
                continue;
            }
            let mut deferred = false;
            for side in 0..4 {
                if let Some(n) = mesh.neighbor_same_or_coarser(c, side) {
                    if mesh.is_active(n) && mesh.cells[n].level < mesh.cells[c].level {
                        if !deferred {
                            stack.push(c);
                            deferred = true;
                        }
                        stack.push(n);
                    }
                }
            }
            if !deferred {
                mesh.split(c, &mut index);
            }
        }
        debug_assert!(mesh.is_one_irregular());
        Ok(Arc::new(mesh))
    }

    /// Refines every active cell once.
    pub fn refine_global(self: &Arc<Mesh>) -> Arc<Mesh> {
        self.refine(&self.active_cells()).expect("global refinement cannot fail")
    }

    /// Finds the active cell containing `x` and the reference coordinates of
    /// `x` within it. Ties on cell boundaries resolve to the lowest active
    /// cell id.
    pub fn locate_point(&self, x: [f64; 2]) -> Result<(usize, [f64; 2]), MeshError> {
        let tol = 1e-12 * self.extent;
        let fi = (x[0] - self.roots.x0) / self.roots.hx;
        let fj = (x[1] - self.roots.y0) / self.roots.hy;
        let mut best: Option<usize> = None;
        // A point near a lattice line can belong to either adjacent root.
        let cand = |f: f64, n: usize, h: f64| -> Vec<i64> {
            let i = f.floor() as i64;
            let mut v = Vec::with_capacity(2);
            let frac_tol = tol / h;
            if (f - f.round()).abs() <= frac_tol {
                v.push(f.round() as i64 - 1);
                v.push(f.round() as i64);
            } else {
                v.push(i);
            }
            v.retain(|&k| k >= 0 && k < n as i64);
            v
        };
        for i in cand(fi, self.roots.nx, self.roots.hx) {
            for j in cand(fj, self.roots.ny, self.roots.hy) {
                if let Some(root) = self.roots.root_at(i, j) {
                    self.collect_containing_leaves(root, x, tol, &mut best);
                }
            }
        }
        let cell = best.ok_or(MeshError::PointOutside(x[0], x[1]))?;
        let b = self.cell_bounds(cell);
        let xi = [
            ((x[0] - b.lo[0]) / (b.hi[0] - b.lo[0])).clamp(0.0, 1.0),
            ((x[1] - b.lo[1]) / (b.hi[1] - b.lo[1])).clamp(0.0, 1.0),
        ];
        Ok((cell, xi))
    }

    fn collect_containing_leaves(&self, id: usize, x: [f64; 2], tol: f64, best: &mut Option<usize>) {
        let b = self.cell_bounds(id);
        if x[0] < b.lo[0] - tol || x[0] > b.hi[0] + tol || x[1] < b.lo[1] - tol || x[1] > b.hi[1] + tol {
            return;
        }
        match self.cells[id].children {
            Some(ch) => {
                for c in ch {
                    self.collect_containing_leaves(c, x, tol, best);
                }
            }
            None => {
                if best.map_or(true, |prev| id < prev) {
                    *best = Some(id);
                }
            }
        }
    }

    /// Evaluates a field given per-active-cell evaluators at an arbitrary
    /// point (used by cross-mesh interpolation).
    pub fn extent(&self) -> f64 {
        self.extent
    }
}
