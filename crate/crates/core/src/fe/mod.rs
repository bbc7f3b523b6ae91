//! Continuous `Q_p` Lagrange finite element spaces on hierarchical quad
//! meshes, with hanging-node and Dirichlet constraint handling, nodal
//! interpolation and cross-mesh transfer, and the spatial weight operators
//! used by the error estimator.

mod basis;
mod operators;

pub use basis::{gauss_legendre, BasisTable, Lagrange1d, QuadBasis, Quadrature1d, QuadratureRule};
pub use operators::{child_to_parent_xi, restrict_to_degree, PatchExtrapolation};

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::mesh::{FaceNeighbor, Mesh, MeshError, SIDE_E, SIDE_N, SIDE_S, SIDE_W};

#[derive(Debug, Error)]
pub enum FeError {
    #[error("unsupported polynomial degree {0}")]
    UnsupportedDegree(usize),
    #[error("spaces live on different meshes")]
    MeshMismatch,
    #[error("restriction requires target degree below source degree ({0} >= {1})")]
    DegreeOrder(usize, usize),
    #[error("cell {0} has no parent: mesh must be at least once globally refined for patch extrapolation")]
    MissingPatch(usize),
    #[error("mesh error: {0}")]
    Mesh(#[from] MeshError),
    #[error("point ({0}, {1}) outside the source domain")]
    OutsideDomain(f64, f64),
}

/// Which boundary faces carry Dirichlet data. Faces are classified by their
/// midpoint.
#[derive(Clone)]
pub enum DirichletSpec {
    None,
    All,
    Where(Arc<dyn Fn([f64; 2]) -> bool + Send + Sync>),
}

impl DirichletSpec {
    fn applies(&self, face_midpoint: [f64; 2]) -> bool {
        match self {
            DirichletSpec::None => false,
            DirichletSpec::All => true,
            DirichletSpec::Where(f) => f(face_midpoint),
        }
    }
}

/// Resolved hanging-node constraints: constrained dof -> (master, weight) list.
#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    map: HashMap<usize, Vec<(usize, f64)>>,
}

impl ConstraintSet {
    pub fn is_constrained(&self, dof: usize) -> bool {
        self.map.contains_key(&dof)
    }

    pub fn masters(&self, dof: usize) -> Option<&[(usize, f64)]> {
        self.map.get(&dof).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[(usize, f64)])> {
        self.map.iter().map(|(&d, m)| (d, m.as_slice()))
    }

    /// Overwrites every constrained entry of `coeffs` with its master
    /// combination, making the coefficient vector conforming.
    pub fn distribute(&self, coeffs: &mut [f64]) {
        for (&slave, masters) in &self.map {
            coeffs[slave] = masters.iter().map(|&(m, w)| w * coeffs[m]).sum();
        }
    }

    /// Inserts an already-resolved constraint (used when composing block
    /// systems from scalar spaces).
    pub(crate) fn insert_raw(&mut self, slave: usize, masters: Vec<(usize, f64)>) {
        self.map.insert(slave, masters);
    }

    #[cfg(test)]
    pub(crate) fn insert_for_tests(&mut self, slave: usize, masters: Vec<(usize, f64)>) {
        self.map.insert(slave, masters);
    }

    /// Substitutes masters that are themselves constrained until the set is
    /// closed (no constrained dof appears as a master).
    fn close(&mut self) {
        loop {
            let mut changed = false;
            let slaves: Vec<usize> = self.map.keys().copied().collect();
            for s in slaves {
                let needs = self.map[&s].iter().any(|&(m, _)| self.map.contains_key(&m));
                if !needs {
                    continue;
                }
                changed = true;
                let mut resolved: HashMap<usize, f64> = HashMap::new();
                for &(m, w) in &self.map[&s].clone() {
                    if let Some(inner) = self.map.get(&m) {
                        for &(mm, ww) in inner.clone().iter() {
                            *resolved.entry(mm).or_insert(0.0) += w * ww;
                        }
                    } else {
                        *resolved.entry(m).or_insert(0.0) += w;
                    }
                }
                let mut list: Vec<(usize, f64)> = resolved.into_iter().collect();
                list.sort_by_key(|&(m, _)| m);
                self.map.insert(s, list);
            }
            if !changed {
                break;
            }
        }
    }
}

/// A scalar continuous `Q_p` space on the active cells of a mesh.
pub struct ScalarSpace {
    pub mesh: Arc<Mesh>,
    pub degree: usize,
    basis: QuadBasis,
    /// Active cell ids in ascending order.
    active: Vec<usize>,
    /// Map cell id -> position in `active` (usize::MAX for inactive cells).
    active_pos: Vec<usize>,
    /// Global dofs per active cell, lexicographic local ordering.
    cell_dofs: Vec<Vec<usize>>,
    pub dof_coords: Vec<[f64; 2]>,
    pub constraints: ConstraintSet,
    /// Dirichlet flag per dof.
    pub dirichlet: Vec<bool>,
}

impl ScalarSpace {
    pub fn n_dofs(&self) -> usize {
        self.dof_coords.len()
    }

    pub fn basis(&self) -> &QuadBasis {
        &self.basis
    }

    pub fn active_cells(&self) -> &[usize] {
        &self.active
    }

    pub fn active_index(&self, cell: usize) -> usize {
        self.active_pos[cell]
    }

    pub fn cell_dofs(&self, cell: usize) -> &[usize] {
        &self.cell_dofs[self.active_pos[cell]]
    }

    /// Evaluates the field at reference coordinates within an active cell.
    pub fn eval(&self, coeffs: &[f64], cell: usize, xi: [f64; 2]) -> f64 {
        let dofs = self.cell_dofs(cell);
        let mut v = 0.0;
        for (i, &d) in dofs.iter().enumerate() {
            v += coeffs[d] * self.basis.value(i, xi);
        }
        v
    }

    /// Physical gradient of the field within an active cell.
    pub fn eval_grad(&self, coeffs: &[f64], cell: usize, xi: [f64; 2]) -> [f64; 2] {
        let b = self.mesh.cell_bounds(cell);
        let inv = [1.0 / (b.hi[0] - b.lo[0]), 1.0 / (b.hi[1] - b.lo[1])];
        let dofs = self.cell_dofs(cell);
        let mut g = [0.0; 2];
        for (i, &d) in dofs.iter().enumerate() {
            let gr = self.basis.grad(i, xi);
            g[0] += coeffs[d] * gr[0] * inv[0];
            g[1] += coeffs[d] * gr[1] * inv[1];
        }
        g
    }

    /// Evaluates at an arbitrary physical point via point location.
    pub fn eval_at(&self, coeffs: &[f64], x: [f64; 2]) -> Result<f64, FeError> {
        let (cell, xi) = self
            .mesh
            .locate_point(x)
            .map_err(|_| FeError::OutsideDomain(x[0], x[1]))?;
        Ok(self.eval(coeffs, cell, xi))
    }

    /// Nodal interpolation of a function, made conforming by constraint
    /// distribution.
    pub fn interpolate(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        let mut coeffs: Vec<f64> = self.dof_coords.iter().map(|&x| f(x)).collect();
        self.constraints.distribute(&mut coeffs);
        coeffs
    }

    /// Dof indices lying on Dirichlet boundary faces.
    pub fn dirichlet_dofs(&self) -> Vec<usize> {
        (0..self.n_dofs()).filter(|&d| self.dirichlet[d]).collect()
    }
}

impl std::fmt::Debug for ScalarSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarSpace")
            .field("degree", &self.degree)
            .field("n_dofs", &self.n_dofs())
            .field("n_constraints", &self.constraints.len())
            .finish()
    }
}

/// Local node indices along a side, in ascending coordinate order.
fn side_nodes(p: usize, side: usize) -> Vec<usize> {
    let n = p + 1;
    match side {
        SIDE_S => (0..n).collect(),
        SIDE_E => (0..n).map(|j| j * n + p).collect(),
        SIDE_N => (0..n).map(|i| p * n + i).collect(),
        SIDE_W => (0..n).map(|j| j * n).collect(),
        _ => unreachable!(),
    }
}

/// Builds a `Q_p` space with shared dofs on conforming faces, hanging-node
/// constraints in closed form, and Dirichlet flags.
pub fn build_space(
    mesh: &Arc<Mesh>,
    degree: usize,
    dirichlet: &DirichletSpec,
) -> Result<Arc<ScalarSpace>, FeError> {
    let basis = QuadBasis::new(degree)?;
    let active = mesh.active_cells();
    let mut active_pos = vec![usize::MAX; mesh.n_cells()];
    for (k, &c) in active.iter().enumerate() {
        active_pos[c] = k;
    }

    // Global numbering by deduplicated node coordinates.
    let mut dof_coords: Vec<[f64; 2]> = Vec::new();
    let mut index = NodeIndex::new(mesh.extent());
    let mut cell_dofs: Vec<Vec<usize>> = Vec::with_capacity(active.len());
    for &c in &active {
        let mut dofs = Vec::with_capacity(basis.n_dofs());
        for i in 0..basis.n_dofs() {
            let x = mesh.map_to_physical(c, basis.node(i));
            dofs.push(index.find_or_insert(x, &mut dof_coords));
        }
        cell_dofs.push(dofs);
    }

    // Hanging-node constraints: fine-side face nodes interpolate the coarse
    // face polynomial.
    let line = Lagrange1d::equispaced(degree);
    let mut constraints = ConstraintSet::default();
    for &c in &active {
        for side in 0..4 {
            let coarse = match mesh.face_neighbor(c, side) {
                FaceNeighbor::Coarser(n) => n,
                _ => continue,
            };
            let opposite = (side + 2) % 4;
            let coarse_dofs: Vec<usize> = side_nodes(degree, opposite)
                .into_iter()
                .map(|i| cell_dofs[active_pos[coarse]][i])
                .collect();
            let cb = mesh.cell_bounds(coarse);
            // Parameterize the coarse face by its in-plane coordinate.
            let axis = if side == SIDE_S || side == SIDE_N { 0 } else { 1 };
            let (lo, hi) = (cb.lo[axis], cb.hi[axis]);
            for i in side_nodes(degree, side) {
                let dof = cell_dofs[active_pos[c]][i];
                if coarse_dofs.contains(&dof) || constraints.is_constrained(dof) {
                    continue;
                }
                let t = (dof_coords[dof][axis] - lo) / (hi - lo);
                let weights: Vec<(usize, f64)> = coarse_dofs
                    .iter()
                    .enumerate()
                    .map(|(m, &md)| (md, line.value(m, t)))
                    .filter(|&(_, w)| w.abs() > 1e-14)
                    .collect();
                constraints.map.insert(dof, weights);
            }
        }
    }
    constraints.close();

    // Dirichlet flags from boundary faces.
    let mut flags = vec![false; dof_coords.len()];
    for &c in &active {
        for side in 0..4 {
            if mesh.face_neighbor(c, side) != FaceNeighbor::Boundary {
                continue;
            }
            let nodes = side_nodes(degree, side);
            let a = mesh.map_to_physical(c, basis.node(nodes[0]));
            let b = mesh.map_to_physical(c, basis.node(nodes[degree]));
            let midpoint = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
            if !dirichlet.applies(midpoint) {
                continue;
            }
            for i in nodes {
                flags[cell_dofs[active_pos[c]][i]] = true;
            }
        }
    }

    Ok(Arc::new(ScalarSpace {
        mesh: Arc::clone(mesh),
        degree,
        basis,
        active,
        active_pos,
        cell_dofs,
        dof_coords,
        constraints,
        dirichlet: flags,
    }))
}

/// Transfers a coefficient vector between spaces by nodal interpolation;
/// exact whenever the target resolves the source (nested meshes, higher or
/// equal degree).
pub fn transfer(coeffs: &[f64], from: &ScalarSpace, to: &ScalarSpace) -> Result<Vec<f64>, FeError> {
    if Arc::ptr_eq(&from.mesh, &to.mesh) && from.degree == to.degree {
        return Ok(coeffs.to_vec());
    }
    let mut out = Vec::with_capacity(to.n_dofs());
    for &x in &to.dof_coords {
        out.push(from.eval_at(coeffs, x)?);
    }
    to.constraints.distribute(&mut out);
    Ok(out)
}

/// Point dedup with tolerance, shared by space building.
struct NodeIndex {
    inv_bin: f64,
    tol: f64,
    bins: HashMap<(i64, i64), Vec<usize>>,
}

impl NodeIndex {
    fn new(extent: f64) -> Self {
        let tol = 1e-9 * extent.max(1e-300);
        NodeIndex {
            inv_bin: 1.0 / (4.0 * tol),
            tol,
            bins: HashMap::new(),
        }
    }

    fn find_or_insert(&mut self, p: [f64; 2], coords: &mut Vec<[f64; 2]>) -> usize {
        let key = (
            (p[0] * self.inv_bin).floor() as i64,
            (p[1] * self.inv_bin).floor() as i64,
        );
        for di in -1..=1 {
            for dj in -1..=1 {
                if let Some(list) = self.bins.get(&(key.0 + di, key.1 + dj)) {
                    for &v in list {
                        let q = coords[v];
                        if (q[0] - p[0]).abs() <= self.tol && (q[1] - p[1]).abs() <= self.tol {
                            return v;
                        }
                    }
                }
            }
        }
        let id = coords.len();
        coords.push(p);
        self.bins.entry(key).or_default().push(id);
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Rect;

    fn unit_square(n: usize) -> Arc<Mesh> {
        Mesh::rectangle(Rect::new([0.0, 0.0], [1.0, 1.0]), n, n).unwrap()
    }

    #[test]
    fn q1_space_on_2x2_has_nine_dofs() {
        let mesh = unit_square(2);
        let sp = build_space(&mesh, 1, &DirichletSpec::All).unwrap();
        assert_eq!(sp.n_dofs(), 9);
        assert_eq!(sp.dirichlet_dofs().len(), 8);
        assert!(sp.constraints.is_empty());
    }

    #[test]
    fn q1_space_on_4x4_has_25_dofs() {
        let mesh = unit_square(4);
        let sp = build_space(&mesh, 1, &DirichletSpec::None).unwrap();
        assert_eq!(sp.n_dofs(), 25);
    }

    #[test]
    fn hanging_node_constraint_weights() {
        // One refined cell on a 2x2 mesh: each hanging vertex dof is the
        // average of the two coarse face endpoints.
        let mesh = unit_square(2).refine(&[0]).unwrap();
        let sp = build_space(&mesh, 1, &DirichletSpec::None).unwrap();
        assert_eq!(sp.constraints.len(), 2);
        for (slave, masters) in sp.constraints.iter() {
            assert_eq!(masters.len(), 2);
            for &(m, w) in masters {
                assert!((w - 0.5).abs() < 1e-12);
                assert!(!sp.constraints.is_constrained(m));
            }
            // Slave sits at the midpoint of its masters.
            let xs = sp.dof_coords[slave];
            let avg = masters.iter().fold([0.0; 2], |acc, &(m, w)| {
                [acc[0] + w * sp.dof_coords[m][0], acc[1] + w * sp.dof_coords[m][1]]
            });
            assert!((xs[0] - avg[0]).abs() < 1e-12 && (xs[1] - avg[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn constraint_weights_sum_to_one() {
        let mesh = unit_square(2).refine(&[0]).unwrap().refine(&[4]).unwrap();
        for p in 1..=3 {
            let sp = build_space(&mesh, p, &DirichletSpec::None).unwrap();
            for (_, masters) in sp.constraints.iter() {
                let s: f64 = masters.iter().map(|&(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolate_constant_and_linear() {
        let mesh = unit_square(4);
        let sp = build_space(&mesh, 1, &DirichletSpec::None).unwrap();
        let ones = sp.interpolate(|_| 1.0);
        assert!(ones.iter().all(|&c| (c - 1.0).abs() < 1e-15));
        let lin = sp.interpolate(|x| x[0]);
        for (d, &c) in lin.iter().enumerate() {
            assert!((c - sp.dof_coords[d][0]).abs() < 1e-15);
        }
    }

    #[test]
    fn continuity_across_hanging_faces() {
        // A conforming interpolant must agree from both sides of a hanging
        // face after constraint distribution.
        let mesh = unit_square(2).refine(&[1]).unwrap();
        for p in 1..=2 {
            let sp = build_space(&mesh, p, &DirichletSpec::None).unwrap();
            let coeffs = sp.interpolate(|x| (3.1 * x[0] - 1.7 * x[1]).sin());
            // The refined SE cell hangs on cells 0 (W side) and 3 (N side).
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            for _ in 0..100 {
                let y = rng.gen_range(0.0..0.5);
                let left = sp.eval_at(&coeffs, [0.5 - 1e-13, y]).unwrap();
                let right = sp.eval_at(&coeffs, [0.5 + 1e-13, y]).unwrap();
                assert!((left - right).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hanging_interpolation_reproduces_polynomials() {
        // Degree-p polynomials are globally continuous through the
        // constraints, including across hanging faces.
        let mesh = unit_square(2).refine(&[0]).unwrap();
        for p in 1..=3 {
            let sp = build_space(&mesh, p, &DirichletSpec::None).unwrap();
            let f = |x: [f64; 2]| (x[0] + 0.3).powi(p as i32) * (1.0 - 0.5 * x[1]).powi(p as i32);
            let coeffs = sp.interpolate(f);
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            for _ in 0..100 {
                let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                let v = sp.eval_at(&coeffs, x).unwrap();
                assert!((v - f(x)).abs() < 1e-10, "p={p} at {x:?}: {v} vs {}", f(x));
            }
        }
    }

    #[test]
    fn transfer_identity_and_nested() {
        let coarse_mesh = unit_square(2);
        let fine_mesh = coarse_mesh.refine_global();
        let coarse = build_space(&coarse_mesh, 1, &DirichletSpec::None).unwrap();
        let fine = build_space(&fine_mesh, 1, &DirichletSpec::None).unwrap();
        let c = coarse.interpolate(|x| 2.0 * x[0] - x[1] + 0.25 * x[0] * x[1]);
        let same = transfer(&c, &coarse, &coarse).unwrap();
        assert_eq!(c, same);
        let f = transfer(&c, &coarse, &fine).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let a = coarse.eval_at(&c, x).unwrap();
            let b = fine.eval_at(&f, x).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transfer_raises_degree_exactly() {
        let mesh = unit_square(2);
        let p1 = build_space(&mesh, 1, &DirichletSpec::None).unwrap();
        let p2 = build_space(&mesh, 2, &DirichletSpec::None).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let c: Vec<f64> = (0..p1.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = transfer(&c, &p1, &p2).unwrap();
        for _ in 0..100 {
            let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let a = p1.eval_at(&c, x).unwrap();
            let b = p2.eval_at(&f, x).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dirichlet_predicate_selects_faces() {
        let mesh = unit_square(2);
        // Dirichlet everywhere except the outflow x = 1.
        let spec = DirichletSpec::Where(Arc::new(|x: [f64; 2]| x[0] < 1.0 - 1e-9));
        let sp = build_space(&mesh, 1, &spec).unwrap();
        for d in sp.dirichlet_dofs() {
            let x = sp.dof_coords[d];
            let on_outflow_interior = (x[0] - 1.0).abs() < 1e-12 && x[1] > 1e-12 && x[1] < 1.0 - 1e-12;
            assert!(!on_outflow_interior);
        }
        // Corners of the outflow edge belong to Dirichlet wall faces.
        assert!(sp
            .dirichlet_dofs()
            .iter()
            .any(|&d| (sp.dof_coords[d][0] - 1.0).abs() < 1e-12));
    }
}
