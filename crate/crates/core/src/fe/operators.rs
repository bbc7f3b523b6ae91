//! Spatial weight operators for the error estimator: patchwise higher-order
//! extrapolation and back-interpolation between degrees.

use std::collections::HashMap;
use std::sync::Arc;

use super::{FeError, QuadBasis, ScalarSpace};

/// Patchwise extrapolation of a degree-`p` field to a single `Q_{2p}`
/// polynomial per parent patch of size `2h`.
///
/// Every active cell must have a parent: the `(2p+1)^2` nodal values of the
/// source field on the parent rectangle determine one biquadratic-or-higher
/// interpolant that is then evaluated back on the children. Reproduces global
/// polynomials of degree `2p` per variable.
pub struct PatchExtrapolation {
    space: Arc<ScalarSpace>,
    basis2p: QuadBasis,
    /// Parent cell id -> `Q_{2p}` coefficients on the parent rectangle.
    patches: HashMap<usize, Vec<f64>>,
}

impl PatchExtrapolation {
    pub fn new(space: &Arc<ScalarSpace>, coeffs: &[f64]) -> Result<Self, FeError> {
        let p = space.degree;
        let basis2p = QuadBasis::new(2 * p)?;
        let mesh = &space.mesh;
        let mut patches: HashMap<usize, Vec<f64>> = HashMap::new();
        for &c in space.active_cells() {
            let parent = mesh.cell(c).parent.ok_or(FeError::MissingPatch(c))?;
            if patches.contains_key(&parent) {
                continue;
            }
            let mut vals = Vec::with_capacity(basis2p.n_dofs());
            for i in 0..basis2p.n_dofs() {
                let x = mesh.map_to_physical(parent, basis2p.node(i));
                vals.push(space.eval_at(coeffs, x)?);
            }
            patches.insert(parent, vals);
        }
        Ok(PatchExtrapolation {
            space: Arc::clone(space),
            basis2p,
            patches,
        })
    }

    /// Reference coordinates of a point of `cell` within the parent patch.
    fn parent_xi(&self, cell: usize, xi: [f64; 2]) -> (usize, [f64; 2]) {
        let mesh = &self.space.mesh;
        let parent = mesh.cell(cell).parent.expect("checked at construction");
        let ch = mesh.cell(parent).children.unwrap();
        let slot = ch.iter().position(|&k| k == cell).unwrap();
        let off = match slot {
            0 => [0.0, 0.0],
            1 => [0.5, 0.0],
            2 => [0.5, 0.5],
            _ => [0.0, 0.5],
        };
        (parent, [off[0] + 0.5 * xi[0], off[1] + 0.5 * xi[1]])
    }

    /// Value of the extrapolated field at reference coordinates of an active
    /// cell.
    pub fn eval(&self, cell: usize, xi: [f64; 2]) -> f64 {
        let (parent, pxi) = self.parent_xi(cell, xi);
        let vals = &self.patches[&parent];
        (0..vals.len()).map(|i| vals[i] * self.basis2p.value(i, pxi)).sum()
    }

    /// Physical gradient of the extrapolated field.
    pub fn eval_grad(&self, cell: usize, xi: [f64; 2]) -> [f64; 2] {
        let (parent, pxi) = self.parent_xi(cell, xi);
        let b = self.space.mesh.cell_bounds(parent);
        let inv = [1.0 / (b.hi[0] - b.lo[0]), 1.0 / (b.hi[1] - b.lo[1])];
        let vals = &self.patches[&parent];
        let mut g = [0.0; 2];
        for (i, &v) in vals.iter().enumerate() {
            let gr = self.basis2p.grad(i, pxi);
            g[0] += v * gr[0] * inv[0];
            g[1] += v * gr[1] * inv[1];
        }
        g
    }

    /// Physical Laplacian of the extrapolated field (axis-aligned cells).
    pub fn eval_laplacian(&self, cell: usize, xi: [f64; 2]) -> f64 {
        let (parent, pxi) = self.parent_xi(cell, xi);
        let b = self.space.mesh.cell_bounds(parent);
        let inv2 = [
            1.0 / ((b.hi[0] - b.lo[0]) * (b.hi[0] - b.lo[0])),
            1.0 / ((b.hi[1] - b.lo[1]) * (b.hi[1] - b.lo[1])),
        ];
        let vals = &self.patches[&parent];
        let mut lap = 0.0;
        for (i, &v) in vals.iter().enumerate() {
            let s = self.basis2p.second(i, pxi);
            lap += v * (s[0] * inv2[0] + s[1] * inv2[1]);
        }
        lap
    }

    /// Evaluates at an arbitrary physical point.
    pub fn eval_at(&self, x: [f64; 2]) -> Result<f64, FeError> {
        let (cell, xi) = self
            .space
            .mesh
            .locate_point(x)
            .map_err(|_| FeError::OutsideDomain(x[0], x[1]))?;
        Ok(self.eval(cell, xi))
    }

    /// The `Q_{2p}` basis living on the parent patches.
    pub fn patch_basis(&self) -> &QuadBasis {
        &self.basis2p
    }

    /// Patch coefficients, child slot, and parent extent of an active cell.
    pub fn patch_view(&self, cell: usize) -> (&[f64], usize, [f64; 2]) {
        let mesh = &self.space.mesh;
        let parent = mesh.cell(cell).parent.expect("checked at construction");
        let ch = mesh.cell(parent).children.unwrap();
        let slot = ch.iter().position(|&k| k == cell).unwrap();
        let b = mesh.cell_bounds(parent);
        (
            &self.patches[&parent],
            slot,
            [b.hi[0] - b.lo[0], b.hi[1] - b.lo[1]],
        )
    }
}

/// Maps reference coordinates of a child cell into its parent patch.
pub fn child_to_parent_xi(slot: usize, xi: [f64; 2]) -> [f64; 2] {
    let off = match slot {
        0 => [0.0, 0.0],
        1 => [0.5, 0.0],
        2 => [0.5, 0.5],
        _ => [0.0, 0.5],
    };
    [off[0] + 0.5 * xi[0], off[1] + 0.5 * xi[1]]
}

/// Back-interpolation of a degree-`q` field onto degree `p < q` on the same
/// mesh. Returns the coefficients in the `p`-space and their re-embedding in
/// the `q`-space (both conforming). The composite is a projection: applying
/// it to a `p`-representable field returns the field itself.
pub fn restrict_to_degree(
    from: &ScalarSpace,
    to: &ScalarSpace,
    coeffs: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), FeError> {
    if !Arc::ptr_eq(&from.mesh, &to.mesh) {
        return Err(FeError::MeshMismatch);
    }
    if to.degree >= from.degree {
        return Err(FeError::DegreeOrder(to.degree, from.degree));
    }
    // Cell-local nodal interpolation in both directions; shared nodes receive
    // identical values by continuity of the source field.
    let mut low = vec![0.0; to.n_dofs()];
    for &c in to.active_cells() {
        let dofs = to.cell_dofs(c);
        for (i, &d) in dofs.iter().enumerate() {
            low[d] = from.eval(coeffs, c, to.basis().node(i));
        }
    }
    to.constraints.distribute(&mut low);
    let mut back = vec![0.0; from.n_dofs()];
    for &c in from.active_cells() {
        let dofs = from.cell_dofs(c);
        for (i, &d) in dofs.iter().enumerate() {
            back[d] = to.eval(&low, c, from.basis().node(i));
        }
    }
    from.constraints.distribute(&mut back);
    Ok((low, back))
}
