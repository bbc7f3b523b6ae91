//! Fully discrete SUPG-stabilized transport: dG(r)-in-time, cG(p)-in-space
//! slab systems for the primal problem and the higher-order dual problem,
//! solved slab by slab (forward and backward sweeps).

use std::sync::Arc;

use thiserror::Error;

use crate::fe::{
    build_space, transfer, DirichletSpec, FeError, QuadratureRule, Quadrature1d, ScalarSpace,
};
use crate::linalg::{solve_direct, LinalgError, SparseMatrix, SystemBuilder};
use crate::mesh::Mesh;
use crate::stokes::{Convection, StokesError};
use crate::timegrid::{SlabGrid, TemporalBasis, TimeError};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("fe error: {0}")]
    Fe(#[from] FeError),
    #[error("mesh error: {0}")]
    Mesh(#[from] crate::mesh::MeshError),
    #[error("linear algebra error in slab {slab}: {source}")]
    Slab { slab: usize, source: LinalgError },
    #[error("linear algebra error: {0}")]
    Linalg(#[from] LinalgError),
    #[error("time error: {0}")]
    Time(#[from] TimeError),
    #[error("stokes error: {0}")]
    Stokes(#[from] StokesError),
    #[error("dual degrees must exceed primal degrees (need p < q and r < s)")]
    DualDegrees,
    #[error("missing dual space on slab {0}")]
    MissingDual(usize),
    #[error("no slabs")]
    Empty,
}

/// Constant coefficients of the transport problem and the SUPG scale.
#[derive(Debug, Clone, Copy)]
pub struct TransportParams {
    /// Diffusion coefficient, must be positive.
    pub eps: f64,
    /// Reaction coefficient.
    pub alpha: f64,
    /// Density in front of the time derivative.
    pub rho: f64,
    /// SUPG scale: per-cell stabilization is `delta_K = delta0 * h_K`.
    pub delta0: f64,
}

impl TransportParams {
    pub fn delta_k(&self, h_k: f64) -> f64 {
        self.delta0 * h_k
    }
}

pub type SpaceTimeFn = Arc<dyn Fn([f64; 2], f64) -> f64 + Send + Sync>;
pub type SpatialFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;

/// Problem data: source, initial and boundary values, convection provider.
#[derive(Clone)]
pub struct ProblemData {
    pub source: SpaceTimeFn,
    pub initial: SpatialFn,
    pub dirichlet_value: SpaceTimeFn,
    pub dirichlet_where: DirichletSpec,
    pub convection: Convection,
}

/// Convection interpolated into a slab space (one component per scalar dof).
pub struct SlabConvection {
    pub space: Arc<ScalarSpace>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
}

impl SlabConvection {
    pub fn interpolate(conv: &Convection, space: &Arc<ScalarSpace>) -> Result<SlabConvection, TransportError> {
        let mut vx = Vec::with_capacity(space.n_dofs());
        let mut vy = Vec::with_capacity(space.n_dofs());
        for &x in &space.dof_coords {
            let v = conv.eval(x)?;
            vx.push(v[0]);
            vy.push(v[1]);
        }
        space.constraints.distribute(&mut vx);
        space.constraints.distribute(&mut vy);
        Ok(SlabConvection {
            space: Arc::clone(space),
            vx,
            vy,
        })
    }

    pub fn eval(&self, cell: usize, xi: [f64; 2]) -> [f64; 2] {
        [
            self.space.eval(&self.vx, cell, xi),
            self.space.eval(&self.vy, cell, xi),
        ]
    }
}

/// One space-time slab: interval, spatial mesh snapshot, primal and optional
/// dual space, and the interpolated convection field.
pub struct Slab {
    pub t0: f64,
    pub t1: f64,
    pub mesh: Arc<Mesh>,
    pub primal: Arc<ScalarSpace>,
    pub dual: Option<Arc<ScalarSpace>>,
    pub conv: Arc<SlabConvection>,
}

impl Slab {
    pub fn tau(&self) -> f64 {
        self.t1 - self.t0
    }
}

/// The slabs of one adaptive loop.
pub struct SlabSet {
    pub slabs: Vec<Slab>,
}

impl SlabSet {
    /// Builds spaces per slab; consecutive slabs sharing a mesh share spaces.
    pub fn build(
        grid: &SlabGrid,
        meshes: &[Arc<Mesh>],
        p: usize,
        q: Option<usize>,
        data: &ProblemData,
    ) -> Result<SlabSet, TransportError> {
        assert_eq!(grid.n_slabs(), meshes.len());
        if let Some(q) = q {
            if q <= p {
                return Err(TransportError::DualDegrees);
            }
        }
        let mut slabs: Vec<Slab> = Vec::with_capacity(meshes.len());
        for (n, mesh) in meshes.iter().enumerate() {
            let (t0, t1) = grid.interval(n);
            let reuse = slabs.last().filter(|s| Arc::ptr_eq(&s.mesh, mesh));
            let (primal, dual, conv) = match reuse {
                Some(prev) => (
                    Arc::clone(&prev.primal),
                    prev.dual.clone(),
                    Arc::clone(&prev.conv),
                ),
                None => {
                    let primal = build_space(mesh, p, &data.dirichlet_where)?;
                    let dual = match q {
                        Some(q) => Some(build_space(mesh, q, &data.dirichlet_where)?),
                        None => None,
                    };
                    let conv_space = dual.as_ref().unwrap_or(&primal);
                    let conv = Arc::new(SlabConvection::interpolate(&data.convection, conv_space)?);
                    (primal, dual, conv)
                }
            };
            slabs.push(Slab {
                t0,
                t1,
                mesh: Arc::clone(mesh),
                primal,
                dual,
                conv,
            });
        }
        Ok(SlabSet { slabs })
    }

    pub fn n_slabs(&self) -> usize {
        self.slabs.len()
    }

    /// Total primal space-time dofs over all slabs.
    pub fn total_dofs(&self, r: usize) -> usize {
        self.slabs.iter().map(|s| (r + 1) * s.primal.n_dofs()).sum()
    }

    pub fn max_cells(&self) -> usize {
        self.slabs.iter().map(|s| s.mesh.n_active_cells()).max().unwrap_or(0)
    }

    pub fn total_cells(&self) -> usize {
        self.slabs.iter().map(|s| s.mesh.n_active_cells()).sum()
    }
}

/// Coefficients of a dG(r)-in-time, cG(p)-in-space field on one slab.
#[derive(Clone)]
pub struct SlabField {
    pub t0: f64,
    pub t1: f64,
    pub space: Arc<ScalarSpace>,
    pub time: TemporalBasis,
    /// `coeffs[time_node][spatial dof]`.
    pub coeffs: Vec<Vec<f64>>,
}

impl SlabField {
    pub fn tau(&self) -> f64 {
        self.t1 - self.t0
    }

    /// Reference time in `[0,1]` of a physical time within the slab.
    pub fn ref_time(&self, t: f64) -> f64 {
        (t - self.t0) / self.tau()
    }

    /// Spatial coefficient vector at reference time `s`.
    pub fn coeffs_at(&self, s: f64) -> Vec<f64> {
        let tv = self.time.values(s);
        let mut out = vec![0.0; self.space.n_dofs()];
        for (i, &ti) in tv.iter().enumerate() {
            if ti == 0.0 {
                continue;
            }
            for (k, v) in out.iter_mut().enumerate() {
                *v += ti * self.coeffs[i][k];
            }
        }
        out
    }

    pub fn eval(&self, cell: usize, xi: [f64; 2], s: f64) -> f64 {
        let tv = self.time.values(s);
        let mut v = 0.0;
        for (i, &ti) in tv.iter().enumerate() {
            if ti != 0.0 {
                v += ti * self.space.eval(&self.coeffs[i], cell, xi);
            }
        }
        v
    }

    pub fn eval_grad(&self, cell: usize, xi: [f64; 2], s: f64) -> [f64; 2] {
        let tv = self.time.values(s);
        let mut g = [0.0; 2];
        for (i, &ti) in tv.iter().enumerate() {
            if ti != 0.0 {
                let gi = self.space.eval_grad(&self.coeffs[i], cell, xi);
                g[0] += ti * gi[0];
                g[1] += ti * gi[1];
            }
        }
        g
    }

    /// Physical time derivative.
    pub fn eval_dt(&self, cell: usize, xi: [f64; 2], s: f64) -> f64 {
        let td = self.time.derivs(s);
        let mut v = 0.0;
        for (i, &ti) in td.iter().enumerate() {
            if ti != 0.0 {
                v += ti * self.space.eval(&self.coeffs[i], cell, xi);
            }
        }
        v / self.tau()
    }
}

/// A space-time field: one `SlabField` per slab, intervals left-open.
pub struct SpaceTimeField {
    pub slabs: Vec<SlabField>,
}

impl SpaceTimeField {
    /// Slab index owning time `t` under the left-open convention.
    pub fn slab_containing(&self, t: f64) -> Option<usize> {
        if self.slabs.is_empty() {
            return None;
        }
        let t_end = self.slabs.last().unwrap().t1;
        if t <= self.slabs[0].t0 || t > t_end + 1e-12 * (t_end - self.slabs[0].t0).abs() {
            return None;
        }
        self.slabs
            .iter()
            .position(|s| t <= s.t1 + 1e-14)
            .or(Some(self.slabs.len() - 1))
    }

    /// Pointwise evaluation at `(x, t)`.
    pub fn eval_at(&self, x: [f64; 2], t: f64) -> Result<f64, FeError> {
        let n = self
            .slab_containing(t)
            .expect("time outside the field's span");
        let f = &self.slabs[n];
        let (cell, xi) = f
            .space
            .mesh
            .locate_point(x)
            .map_err(|_| FeError::OutsideDomain(x[0], x[1]))?;
        Ok(f.eval(cell, xi, f.ref_time(t)))
    }
}

/// Raw (uncondensed) spatial operators on one space for one convection field.
pub struct RawOps {
    pub mass: SparseMatrix,
    /// `eps (grad u, grad v) + (b . grad u, v) + alpha (u, v)`.
    pub stiff: SparseMatrix,
    /// SUPG mass-type block `sum_K delta_K (u, b . grad v)_K`.
    pub supg_mass: SparseMatrix,
    /// SUPG stiffness-type block
    /// `sum_K delta_K (-eps lap u + b . grad u + alpha u, b . grad v)_K`.
    pub supg_stiff: SparseMatrix,
}

/// Per-run quadrature choices for slab integrals.
#[derive(Debug, Clone)]
pub struct SlabQuad {
    pub time: Quadrature1d,
    pub space: QuadratureRule,
}

impl SlabQuad {
    /// Assembly rules: `r+s+2` Gauss points in time, `max(p,q)+2` per
    /// direction in space (with `s = r`, `q = p` when no dual is present).
    pub fn for_degrees(r: usize, p: usize, s: Option<usize>, q: Option<usize>) -> SlabQuad {
        let s = s.unwrap_or(r);
        let q = q.unwrap_or(p);
        SlabQuad {
            time: crate::timegrid::temporal_quadrature(r + s + 2),
            space: QuadratureRule::gauss(p.max(q) + 2),
        }
    }
}

/// Assembles the raw spatial matrices on `space` with convection `conv`.
pub fn build_raw_ops(
    space: &Arc<ScalarSpace>,
    conv: &SlabConvection,
    params: &TransportParams,
    quad: &QuadratureRule,
) -> Result<RawOps, TransportError> {
    let n = space.n_dofs();
    let nd = space.basis().n_dofs();
    let with_supg = params.delta0 != 0.0;
    let mut t_mass = Vec::new();
    let mut t_stiff = Vec::new();
    let mut t_sm = Vec::new();
    let mut t_sv = Vec::new();
    for &cell in space.active_cells() {
        let b = space.mesh.cell_bounds(cell);
        let (w, h) = (b.hi[0] - b.lo[0], b.hi[1] - b.lo[1]);
        let delta = params.delta_k(space.mesh.cell_diameter(cell));
        let dofs = space.cell_dofs(cell);
        for (qi, &xi) in quad.points.iter().enumerate() {
            let jxw = quad.weights[qi] * w * h;
            let (vals, rgrads) = space.basis().eval_all(xi);
            let grads: Vec<[f64; 2]> = rgrads.iter().map(|g| [g[0] / w, g[1] / h]).collect();
            let vel = conv.eval(cell, xi);
            let lap: Vec<f64> = if with_supg && space.degree > 1 {
                (0..nd)
                    .map(|i| {
                        let s = space.basis().second(i, xi);
                        s[0] / (w * w) + s[1] / (h * h)
                    })
                    .collect()
            } else {
                vec![0.0; nd]
            };
            for i in 0..nd {
                let bgrad_i = vel[0] * grads[i][0] + vel[1] * grads[i][1];
                for j in 0..nd {
                    let bgrad_j = vel[0] * grads[j][0] + vel[1] * grads[j][1];
                    t_mass.push((dofs[i], dofs[j], jxw * vals[i] * vals[j]));
                    let a_ij = params.eps * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1])
                        + bgrad_j * vals[i]
                        + params.alpha * vals[j] * vals[i];
                    t_stiff.push((dofs[i], dofs[j], jxw * a_ij));
                    if with_supg {
                        t_sm.push((dofs[i], dofs[j], jxw * delta * vals[j] * bgrad_i));
                        let strong_j = -params.eps * lap[j] + bgrad_j + params.alpha * vals[j];
                        t_sv.push((dofs[i], dofs[j], jxw * delta * strong_j * bgrad_i));
                    }
                }
            }
        }
    }
    Ok(RawOps {
        mass: SparseMatrix::from_triplets(n, n, &t_mass)?,
        stiff: SparseMatrix::from_triplets(n, n, &t_stiff)?,
        supg_mass: SparseMatrix::from_triplets(n, n, &t_sm)?,
        supg_stiff: SparseMatrix::from_triplets(n, n, &t_sv)?,
    })
}

/// Left-end data for a primal slab: the analytic initial value on the first
/// slab, or the previous slab's right trace already transferred to this
/// slab's primal space.
pub enum PrevTrace<'a> {
    Initial,
    Trace(&'a [f64]),
}

/// Temporal matrices on the reference interval for a basis pair.
struct TimeMats {
    /// `mass[i][j] = int T_j T_i ds`
    mass: Vec<Vec<f64>>,
    /// `deriv[i][j] = int T_j' T_i ds`
    deriv: Vec<Vec<f64>>,
    at0: Vec<f64>,
    at1: Vec<f64>,
}

fn time_mats(tb: &TemporalBasis, quad: &Quadrature1d) -> TimeMats {
    let n = tb.n_dofs();
    let mut mass = vec![vec![0.0; n]; n];
    let mut deriv = vec![vec![0.0; n]; n];
    for (&s, &w) in quad.points.iter().zip(&quad.weights) {
        let v = tb.values(s);
        let d = tb.derivs(s);
        for i in 0..n {
            for j in 0..n {
                mass[i][j] += w * v[j] * v[i];
                deriv[i][j] += w * d[j] * v[i];
            }
        }
    }
    TimeMats {
        mass,
        deriv,
        at0: tb.values(0.0),
        at1: tb.values(1.0),
    }
}

/// Assembled slab system together with its block layout.
pub struct SlabSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    pub n_space: usize,
    pub n_time: usize,
}

fn block_constraints(space: &ScalarSpace, n_time: usize) -> crate::fe::ConstraintSet {
    let n = space.n_dofs();
    let mut cs = crate::fe::ConstraintSet::default();
    for (slave, masters) in space.constraints.iter() {
        for i in 0..n_time {
            let shifted: Vec<(usize, f64)> =
                masters.iter().map(|&(m, w)| (i * n + m, w)).collect();
            cs.insert_raw(i * n + slave, shifted);
        }
    }
    cs
}

/// Assembles the primal dG(r) system on one slab:
/// `int_In { (rho du/dt, phi) + a(u)(phi) } dt + (rho [u]_{n-1}, phi+) `
/// plus the SUPG sums, with time-dependent Dirichlet values pinned at the
/// temporal support points.
#[allow(clippy::too_many_arguments)]
pub fn assemble_primal_slab(
    space: &Arc<ScalarSpace>,
    tb: &TemporalBasis,
    interval: (f64, f64),
    params: &TransportParams,
    data: &ProblemData,
    conv: &SlabConvection,
    raw: &RawOps,
    prev: PrevTrace<'_>,
    quad: &SlabQuad,
) -> Result<SlabSystem, TransportError> {
    let n = space.n_dofs();
    let nt = tb.n_dofs();
    let (t0, t1) = interval;
    let tau = t1 - t0;
    let tm = time_mats(tb, &quad.time);
    let with_supg = params.delta0 != 0.0;

    let constraints = block_constraints(space, nt);
    let mut pinned = Vec::new();
    for d in 0..n {
        if space.dirichlet[d] {
            for (i, &node) in tb.nodes().iter().enumerate() {
                let t = crate::mesh::lerp(t0, t1, node);
                pinned.push((i * n + d, (data.dirichlet_value)(space.dof_coords[d], t)));
            }
        }
    }
    let mut sb = SystemBuilder::new(nt * n, &constraints, &pinned);

    // Kronecker assembly of the raw spatial operators with temporal factors.
    let emit = |sb: &mut SystemBuilder, mat: &SparseMatrix, factor: &dyn Fn(usize, usize) -> f64| {
        for row in 0..mat.n_rows {
            let (cols, vals) = mat.row(row);
            for (col, v) in cols.iter().zip(vals) {
                for i in 0..nt {
                    for j in 0..nt {
                        let f = factor(i, j);
                        if f != 0.0 {
                            sb.add_entry(i * n + row, j * n + col, f * v);
                        }
                    }
                }
            }
        }
    };
    // (rho du/dt, phi) + jump at t0: rho (M + S_m) x (deriv + T(0) T(0)).
    emit(&mut sb, &raw.mass, &|i, j| {
        params.rho * (tm.deriv[i][j] + tm.at0[i] * tm.at0[j])
    });
    if with_supg {
        emit(&mut sb, &raw.supg_mass, &|i, j| {
            params.rho * (tm.deriv[i][j] + tm.at0[i] * tm.at0[j])
        });
        emit(&mut sb, &raw.supg_stiff, &|i, j| tau * tm.mass[i][j]);
    }
    // a(u)(phi) under the time integral.
    emit(&mut sb, &raw.stiff, &|i, j| tau * tm.mass[i][j]);

    // Source terms: (g, phi) and the SUPG counterpart, by quadrature in time.
    for (&sq, &wq) in quad.time.points.iter().zip(&quad.time.weights) {
        let t = crate::mesh::lerp(t0, t1, sq);
        let tv = tb.values(sq);
        let gvec =
            assemble_data_vector(space, conv, params, &quad.space, &|x| (data.source)(x, t));
        for (i, &ti) in tv.iter().enumerate() {
            let scale = wq * tau * ti;
            if scale == 0.0 {
                continue;
            }
            for (dof, &g) in gvec.iter().enumerate() {
                sb.add_rhs(i * n + dof, scale * g);
            }
        }
    }

    // Left-end coupling: rho (u_{n-1}^-, phi(t0)) plus the SUPG jump part.
    match prev {
        PrevTrace::Initial => {
            let u0vec =
                assemble_data_vector(space, conv, params, &quad.space, &|x| (data.initial)(x));
            for (i, &ti0) in tm.at0.iter().enumerate() {
                if ti0 == 0.0 {
                    continue;
                }
                for (dof, &v) in u0vec.iter().enumerate() {
                    sb.add_rhs(i * n + dof, params.rho * ti0 * v);
                }
            }
        }
        PrevTrace::Trace(prev_coeffs) => {
            let mut v = raw.mass.matvec(prev_coeffs)?;
            if with_supg {
                let sv = raw.supg_mass.matvec(prev_coeffs)?;
                for (a, b) in v.iter_mut().zip(&sv) {
                    *a += b;
                }
            }
            for (i, &ti0) in tm.at0.iter().enumerate() {
                if ti0 == 0.0 {
                    continue;
                }
                for (dof, &val) in v.iter().enumerate() {
                    sb.add_rhs(i * n + dof, params.rho * ti0 * val);
                }
            }
        }
    }

    let (matrix, rhs) = sb.build()?;
    Ok(SlabSystem {
        matrix,
        rhs,
        n_space: n,
        n_time: nt,
    })
}

/// Assembles `(f, psi) + sum_K delta_K (f, b . grad psi)_K` for a spatial
/// function `f` (used for sources, initial data and goal densities).
fn assemble_data_vector(
    space: &ScalarSpace,
    conv: &SlabConvection,
    params: &TransportParams,
    quad: &QuadratureRule,
    f: &dyn Fn([f64; 2]) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; space.n_dofs()];
    let with_supg = params.delta0 != 0.0;
    for &cell in space.active_cells() {
        let b = space.mesh.cell_bounds(cell);
        let (w, h) = (b.hi[0] - b.lo[0], b.hi[1] - b.lo[1]);
        let delta = params.delta_k(space.mesh.cell_diameter(cell));
        let dofs = space.cell_dofs(cell);
        for (qi, &xi) in quad.points.iter().enumerate() {
            let jxw = quad.weights[qi] * w * h;
            let x = space.mesh.map_to_physical(cell, xi);
            let fv = f(x);
            if fv == 0.0 {
                continue;
            }
            let (vals, rgrads) = space.basis().eval_all(xi);
            let vel = if with_supg { conv.eval(cell, xi) } else { [0.0; 2] };
            for (i, &dof) in dofs.iter().enumerate() {
                let mut test = vals[i];
                if with_supg {
                    let bgrad = vel[0] * rgrads[i][0] / w + vel[1] * rgrads[i][1] / h;
                    test += delta * bgrad;
                }
                out[dof] += jxw * fv * test;
            }
        }
    }
    out
}

/// Assembles the dual dG(s) system on one slab from the adjoint form
/// `int_In { (phi, -rho dz/dt) + a'(phi, z) } dt + (phi(t_n^-), rho z(t_n^-))`
/// plus the adjoint SUPG terms, with homogeneous Dirichlet values. The trace
/// of the next slab's dual solution enters the right-hand side.
#[allow(clippy::too_many_arguments)]
pub fn assemble_dual_slab(
    space: &Arc<ScalarSpace>,
    tb: &TemporalBasis,
    interval: (f64, f64),
    params: &TransportParams,
    goal_density: &dyn Fn([f64; 2], f64) -> f64,
    conv: &SlabConvection,
    raw: &RawOps,
    next_trace: Option<&[f64]>,
    quad: &SlabQuad,
) -> Result<SlabSystem, TransportError> {
    let n = space.n_dofs();
    let nt = tb.n_dofs();
    let (t0, t1) = interval;
    let tau = t1 - t0;
    let tm = time_mats(tb, &quad.time);
    let with_supg = params.delta0 != 0.0;

    let constraints = block_constraints(space, nt);
    let mut pinned = Vec::new();
    for d in 0..n {
        if space.dirichlet[d] {
            for i in 0..nt {
                pinned.push((i * n + d, 0.0));
            }
        }
    }
    let mut sb = SystemBuilder::new(nt * n, &constraints, &pinned);

    // Transposed spatial emission with temporal factors.
    let emit_t = |sb: &mut SystemBuilder, mat: &SparseMatrix, factor: &dyn Fn(usize, usize) -> f64| {
        for row in 0..mat.n_rows {
            let (cols, vals) = mat.row(row);
            for (col, v) in cols.iter().zip(vals) {
                // (row, col) of the primal operator becomes (col, row) here.
                for i in 0..nt {
                    for j in 0..nt {
                        let f = factor(i, j);
                        if f != 0.0 {
                            sb.add_entry(i * n + col, j * n + row, f * v);
                        }
                    }
                }
            }
        }
    };
    // (phi, -rho dz/dt) + terminal trace: rho M x (-deriv + T(1)T(1)).
    emit_t(&mut sb, &raw.mass, &|i, j| {
        params.rho * (-tm.deriv[i][j] + tm.at1[i] * tm.at1[j])
    });
    // a'(phi, z): transpose of the stiffness.
    emit_t(&mut sb, &raw.stiff, &|i, j| tau * tm.mass[i][j]);
    if with_supg {
        // S'(phi, z): rho d(phi)/dt and left-end trace against b.grad z.
        emit_t(&mut sb, &raw.supg_mass, &|i, j| {
            params.rho * (tm.deriv[j][i] + tm.at0[i] * tm.at0[j])
        });
        emit_t(&mut sb, &raw.supg_stiff, &|i, j| tau * tm.mass[i][j]);
    }

    // Goal density: J_1'(u)(phi) restricted to the slab.
    for (&sq, &wq) in quad.time.points.iter().zip(&quad.time.weights) {
        let t = crate::mesh::lerp(t0, t1, sq);
        let tv = tb.values(sq);
        let plain = TransportParams { delta0: 0.0, ..*params };
        let jvec = assemble_data_vector(space, conv, &plain, &quad.space, &|x| goal_density(x, t));
        for (i, &ti) in tv.iter().enumerate() {
            let scale = wq * tau * ti;
            if scale == 0.0 {
                continue;
            }
            for (dof, &g) in jvec.iter().enumerate() {
                sb.add_rhs(i * n + dof, scale * g);
            }
        }
    }

    // Incoming trace from the later slab: rho (phi(t_n^-), z_n^+) and the
    // adjoint SUPG jump contribution.
    if let Some(znext) = next_trace {
        let mut v = raw.mass.matvec(znext)?;
        if with_supg {
            // delta rho (phi(t_n^-), b . grad z_n^+): transposed SUPG mass.
            let sv = raw.supg_mass.transpose().matvec(znext)?;
            for (a, b) in v.iter_mut().zip(&sv) {
                *a += b;
            }
        }
        for (i, &ti1) in tm.at1.iter().enumerate() {
            if ti1 == 0.0 {
                continue;
            }
            for (dof, &val) in v.iter().enumerate() {
                sb.add_rhs(i * n + dof, params.rho * ti1 * val);
            }
        }
    }

    let (matrix, rhs) = sb.build()?;
    Ok(SlabSystem {
        matrix,
        rhs,
        n_space: n,
        n_time: nt,
    })
}

fn solve_slab_system(
    sys: &SlabSystem,
    space: &ScalarSpace,
    slab_idx: usize,
) -> Result<Vec<Vec<f64>>, TransportError> {
    let x = solve_direct(&sys.matrix, &sys.rhs)
        .map_err(|source| TransportError::Slab { slab: slab_idx, source })?;
    let mut blocks = Vec::with_capacity(sys.n_time);
    for i in 0..sys.n_time {
        let mut c = x[i * sys.n_space..(i + 1) * sys.n_space].to_vec();
        space.constraints.distribute(&mut c);
        blocks.push(c);
    }
    Ok(blocks)
}

/// Forward sweep of the primal problem over all slabs.
pub fn solve_primal(
    set: &SlabSet,
    r: usize,
    params: &TransportParams,
    data: &ProblemData,
    quad: &SlabQuad,
) -> Result<SpaceTimeField, TransportError> {
    if set.slabs.is_empty() {
        return Err(TransportError::Empty);
    }
    let tb = TemporalBasis::dg(r);
    let mut fields: Vec<SlabField> = Vec::with_capacity(set.n_slabs());
    let mut raw_cache: Option<(Arc<ScalarSpace>, Arc<RawOps>)> = None;
    for (idx, slab) in set.slabs.iter().enumerate() {
        let raw = match &raw_cache {
            Some((sp, ops)) if Arc::ptr_eq(sp, &slab.primal) => Arc::clone(ops),
            _ => {
                let ops = Arc::new(build_raw_ops(&slab.primal, &slab.conv, params, &quad.space)?);
                raw_cache = Some((Arc::clone(&slab.primal), Arc::clone(&ops)));
                ops
            }
        };
        let prev_owned;
        let prev = if idx == 0 {
            PrevTrace::Initial
        } else {
            let last = fields.last().unwrap();
            let trace = last.coeffs.last().unwrap();
            prev_owned = transfer(trace, &last.space, &slab.primal)?;
            PrevTrace::Trace(&prev_owned)
        };
        let sys = assemble_primal_slab(
            &slab.primal,
            &tb,
            (slab.t0, slab.t1),
            params,
            data,
            &slab.conv,
            &raw,
            prev,
            quad,
        )?;
        let coeffs = solve_slab_system(&sys, &slab.primal, idx)?;
        fields.push(SlabField {
            t0: slab.t0,
            t1: slab.t1,
            space: Arc::clone(&slab.primal),
            time: tb.clone(),
            coeffs,
        });
    }
    Ok(SpaceTimeField { slabs: fields })
}

/// Backward sweep of the dual problem over all slabs (homogeneous terminal
/// condition; the goal enters through its density).
pub fn solve_dual(
    set: &SlabSet,
    s: usize,
    params: &TransportParams,
    goal_density: &dyn Fn([f64; 2], f64) -> f64,
    quad: &SlabQuad,
) -> Result<SpaceTimeField, TransportError> {
    if set.slabs.is_empty() {
        return Err(TransportError::Empty);
    }
    let tb = TemporalBasis::dg(s);
    let n_slabs = set.n_slabs();
    let mut fields: Vec<Option<SlabField>> = (0..n_slabs).map(|_| None).collect();
    let mut raw_cache: Option<(Arc<ScalarSpace>, Arc<RawOps>)> = None;
    for idx in (0..n_slabs).rev() {
        let slab = &set.slabs[idx];
        let dual = slab.dual.as_ref().ok_or(TransportError::MissingDual(idx))?;
        let raw = match &raw_cache {
            Some((sp, ops)) if Arc::ptr_eq(sp, dual) => Arc::clone(ops),
            _ => {
                let ops = Arc::new(build_raw_ops(dual, &slab.conv, params, &quad.space)?);
                raw_cache = Some((Arc::clone(dual), Arc::clone(&ops)));
                ops
            }
        };
        let next_owned;
        let next = if idx + 1 < n_slabs {
            let nf = fields[idx + 1].as_ref().unwrap();
            // z_{n}^+ is the left trace of slab n+1, transferred here.
            let trace = nf.coeffs_at(0.0);
            next_owned = transfer(&trace, &nf.space, dual)?;
            Some(next_owned.as_slice())
        } else {
            None
        };
        let sys = assemble_dual_slab(
            dual,
            &tb,
            (slab.t0, slab.t1),
            params,
            goal_density,
            &slab.conv,
            &raw,
            next,
            quad,
        )?;
        let coeffs = solve_slab_system(&sys, dual, idx)?;
        fields[idx] = Some(SlabField {
            t0: slab.t0,
            t1: slab.t1,
            space: Arc::clone(dual),
            time: tb.clone(),
            coeffs,
        });
    }
    Ok(SpaceTimeField {
        slabs: fields.into_iter().map(Option::unwrap).collect(),
    })
}

/// Space-time `L2(L2)` inner-product quadrature of `u` against a density
/// `w(x, t)`: the slab-by-slab evaluation of linear goal functionals.
pub fn spacetime_inner(
    field: &SpaceTimeField,
    w: &dyn Fn([f64; 2], f64) -> f64,
    n_time_q: usize,
    n_space_q: usize,
) -> f64 {
    let tq = crate::timegrid::temporal_quadrature(n_time_q);
    let xq = QuadratureRule::gauss(n_space_q);
    let mut total = 0.0;
    for f in &field.slabs {
        let tau = f.tau();
        for (&sq, &wq) in tq.points.iter().zip(&tq.weights) {
            let t = crate::mesh::lerp(f.t0, f.t1, sq);
            let tv = f.time.values(sq);
            for &cell in f.space.active_cells() {
                let b = f.space.mesh.cell_bounds(cell);
                let jac = (b.hi[0] - b.lo[0]) * (b.hi[1] - b.lo[1]);
                let dofs = f.space.cell_dofs(cell);
                for (qi, &xi) in xq.points.iter().enumerate() {
                    let x = f.space.mesh.map_to_physical(cell, xi);
                    let mut u = 0.0;
                    for (i, &ti) in tv.iter().enumerate() {
                        if ti != 0.0 {
                            for (k, &d) in dofs.iter().enumerate() {
                                u += ti * f.coeffs[i][d] * f.space.basis().value(k, xi);
                            }
                        }
                    }
                    total += wq * tau * xq.weights[qi] * jac * u * w(x, t);
                }
            }
        }
    }
    total
}

/// Global `L2(L2)` norm of `u - exact` by slab-wise quadrature.
pub fn l2l2_error(
    field: &SpaceTimeField,
    exact: &dyn Fn([f64; 2], f64) -> f64,
    n_time_q: usize,
    n_space_q: usize,
) -> f64 {
    let tq = crate::timegrid::temporal_quadrature(n_time_q);
    let xq = QuadratureRule::gauss(n_space_q);
    let mut total = 0.0;
    for f in &field.slabs {
        let tau = f.tau();
        for (&sq, &wq) in tq.points.iter().zip(&tq.weights) {
            let t = crate::mesh::lerp(f.t0, f.t1, sq);
            let tv = f.time.values(sq);
            for &cell in f.space.active_cells() {
                let b = f.space.mesh.cell_bounds(cell);
                let jac = (b.hi[0] - b.lo[0]) * (b.hi[1] - b.lo[1]);
                let dofs = f.space.cell_dofs(cell);
                for (qi, &xi) in xq.points.iter().enumerate() {
                    let x = f.space.mesh.map_to_physical(cell, xi);
                    let mut u = 0.0;
                    for (i, &ti) in tv.iter().enumerate() {
                        if ti != 0.0 {
                            for (k, &d) in dofs.iter().enumerate() {
                                u += ti * f.coeffs[i][d] * f.space.basis().value(k, xi);
                            }
                        }
                    }
                    let e = u - exact(x, t);
                    total += wq * tau * xq.weights[qi] * jac * e * e;
                }
            }
        }
    }
    total.sqrt()
}

/// `L2(L2)` norm of the discrete field itself.
pub fn l2l2_norm(field: &SpaceTimeField, n_time_q: usize, n_space_q: usize) -> f64 {
    l2l2_error(field, &|_, _| 0.0, n_time_q, n_space_q)
}
