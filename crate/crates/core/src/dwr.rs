//! Dual-weighted residual error indicators: slabwise temporal indicators
//! `eta_tau^n` and cellwise spatial indicators `eta_{h,K}^n`, built from the
//! primal/dual residuals weighted by higher-order recovery of the unknown
//! solutions, plus the SUPG stabilization correction.

use std::sync::Arc;

use crate::fe::{
    child_to_parent_xi, restrict_to_degree, BasisTable, PatchExtrapolation, QuadBasis,
};
use crate::timegrid::{apply_temporal_matrix, extrapolation_basis, restriction_matrix};
use crate::transport::{
    ProblemData, SlabConvection, SlabField, SlabQuad, SlabSet, SpaceTimeField, TransportError,
    TransportParams,
};

/// Per-slab and per-cell error indicators with their totals.
#[derive(Debug, Clone)]
pub struct ErrorIndicators {
    /// `eta_tau^n` per slab.
    pub eta_tau_per_slab: Vec<f64>,
    /// `eta_{h,K}^n` per slab, indexed like the slab's active cells.
    pub eta_h_per_cell: Vec<Vec<f64>>,
    pub eta_tau: f64,
    pub eta_h: f64,
}

impl ErrorIndicators {
    fn from_parts(eta_tau_per_slab: Vec<f64>, eta_h_per_cell: Vec<Vec<f64>>) -> Self {
        let eta_tau = eta_tau_per_slab.iter().sum();
        let eta_h = eta_h_per_cell.iter().map(|c| c.iter().sum::<f64>()).sum();
        ErrorIndicators {
            eta_tau_per_slab,
            eta_h_per_cell,
            eta_tau,
            eta_h,
        }
    }

    /// Total estimated error `eta_tau + eta_h` (signed).
    pub fn total(&self) -> f64 {
        self.eta_tau + self.eta_h
    }

    /// Effectivity index `|total / exact_error|`; absent for zero error.
    pub fn effectivity(&self, exact_error: f64) -> Option<f64> {
        (exact_error != 0.0).then(|| (self.total() / exact_error).abs())
    }
}

/// Left-end data of a slab for residual evaluation: the analytic initial
/// value on the first slab, or the previous trace on this slab's space.
pub enum LeftValue<'a> {
    Initial,
    Coeffs(&'a [f64]),
}

/// Primal residual of one slab against an arbitrary conforming weight field
/// (any degree on the same mesh), optionally restricted to one cell:
/// `rho^n(u)(w) = int_In [(g,w) - (rho du/dt, w) - a(u)(w)] dt
///             - (rho [u]_{n-1}, w(t_{n-1}^+))`.
#[allow(clippy::too_many_arguments)]
pub fn primal_residual(
    u: &SlabField,
    left: LeftValue<'_>,
    weight: &SlabField,
    params: &TransportParams,
    data: &ProblemData,
    conv: &SlabConvection,
    quad: &SlabQuad,
    cell_filter: Option<usize>,
) -> f64 {
    let sp = &u.space;
    let sw = &weight.space;
    let tau = u.tau();
    let mut acc = 0.0;
    let cells: Vec<usize> = match cell_filter {
        Some(c) => vec![c],
        None => sp.active_cells().to_vec(),
    };
    for &cell in &cells {
        let b = sp.mesh.cell_bounds(cell);
        let (w, h) = (b.hi[0] - b.lo[0], b.hi[1] - b.lo[1]);
        let u_tab = BasisTable::tabulate(sp.basis(), &quad.space.points);
        let w_tab = BasisTable::tabulate(sw.basis(), &quad.space.points);
        let u_dofs = sp.cell_dofs(cell);
        let w_dofs = sw.cell_dofs(cell);
        for (&sq, &wq) in quad.time.points.iter().zip(&quad.time.weights) {
            let t = crate::mesh::lerp(u.t0, u.t1, sq);
            let tu = u.time.values(sq);
            let tud = u.time.derivs(sq);
            let tw = weight.time.values(sq);
            for (qi, &xi) in quad.space.points.iter().enumerate() {
                let jxw = wq * tau * quad.space.weights[qi] * w * h;
                let x = sp.mesh.map_to_physical(cell, xi);
                let vel = conv.eval(cell, xi);
                let (mut uv, mut ut) = (0.0, 0.0);
                let mut ug = [0.0, 0.0];
                for (i, &d) in u_dofs.iter().enumerate() {
                    let bv = u_tab.values[qi][i];
                    let bg = u_tab.grads[qi][i];
                    for (k, (&tk, &tdk)) in tu.iter().zip(&tud).enumerate() {
                        let c = u.coeffs[k][d];
                        uv += tk * c * bv;
                        ut += tdk / tau * c * bv;
                        ug[0] += tk * c * bg[0] / w;
                        ug[1] += tk * c * bg[1] / h;
                    }
                }
                let (mut wv, mut wgx, mut wgy) = (0.0, 0.0, 0.0);
                for (i, &d) in w_dofs.iter().enumerate() {
                    let bv = w_tab.values[qi][i];
                    let bg = w_tab.grads[qi][i];
                    for (k, &tk) in tw.iter().enumerate() {
                        let c = weight.coeffs[k][d];
                        wv += tk * c * bv;
                        wgx += tk * c * bg[0] / w;
                        wgy += tk * c * bg[1] / h;
                    }
                }
                let g = (data.source)(x, t);
                acc += jxw
                    * ((g - params.rho * ut - params.alpha * uv) * wv
                        - params.eps * (ug[0] * wgx + ug[1] * wgy)
                        - (vel[0] * ug[0] + vel[1] * ug[1]) * wv);
            }
        }
        // Jump term at the slab's left end.
        let tu0 = u.time.values(0.0);
        let tw0 = weight.time.values(0.0);
        for (qi, &xi) in quad.space.points.iter().enumerate() {
            let jxw = quad.space.weights[qi] * w * h;
            let x = sp.mesh.map_to_physical(cell, xi);
            let mut up = 0.0;
            for (i, &d) in u_dofs.iter().enumerate() {
                let bv = u_tab.values[qi][i];
                for (k, &tk) in tu0.iter().enumerate() {
                    up += tk * u.coeffs[k][d] * bv;
                }
            }
            let uprev = match left {
                LeftValue::Initial => (data.initial)(x),
                LeftValue::Coeffs(c) => {
                    let mut v = 0.0;
                    for (i, &d) in u_dofs.iter().enumerate() {
                        v += c[d] * u_tab.values[qi][i];
                    }
                    v
                }
            };
            let mut wv = 0.0;
            for (i, &d) in w_dofs.iter().enumerate() {
                let bv = w_tab.values[qi][i];
                for (k, &tk) in tw0.iter().enumerate() {
                    wv += tk * weight.coeffs[k][d] * bv;
                }
            }
            acc -= jxw * params.rho * (up - uprev) * wv;
        }
    }
    acc
}

/// Dual residual of one slab against a conforming weight field:
/// `rho*^n(u,z)(w) = int_In [J_1'(w) + (w, rho dz/dt) - a'(w, z)] dt
///                + (w(t_n^-), rho [z]_n)` (terminal slab: `- (w, rho z_N^-)`).
/// `z_next` is the later slab's trace already transferred to this space.
#[allow(clippy::too_many_arguments)]
pub fn dual_residual(
    z: &SlabField,
    z_next: Option<&[f64]>,
    goal_density: &dyn Fn([f64; 2], f64) -> f64,
    weight: &SlabField,
    params: &TransportParams,
    conv: &SlabConvection,
    quad: &SlabQuad,
    cell_filter: Option<usize>,
) -> f64 {
    let sz = &z.space;
    let sw = &weight.space;
    let tau = z.tau();
    let mut acc = 0.0;
    let cells: Vec<usize> = match cell_filter {
        Some(c) => vec![c],
        None => sz.active_cells().to_vec(),
    };
    for &cell in &cells {
        let b = sz.mesh.cell_bounds(cell);
        let (w, h) = (b.hi[0] - b.lo[0], b.hi[1] - b.lo[1]);
        let z_tab = BasisTable::tabulate(sz.basis(), &quad.space.points);
        let w_tab = BasisTable::tabulate(sw.basis(), &quad.space.points);
        let z_dofs = sz.cell_dofs(cell);
        let w_dofs = sw.cell_dofs(cell);
        for (&sq, &wq) in quad.time.points.iter().zip(&quad.time.weights) {
            let t = crate::mesh::lerp(z.t0, z.t1, sq);
            let tz = z.time.values(sq);
            let tzd = z.time.derivs(sq);
            let tw = weight.time.values(sq);
            for (qi, &xi) in quad.space.points.iter().enumerate() {
                let jxw = wq * tau * quad.space.weights[qi] * w * h;
                let x = sz.mesh.map_to_physical(cell, xi);
                let vel = conv.eval(cell, xi);
                let (mut zv, mut zt) = (0.0, 0.0);
                let mut zg = [0.0, 0.0];
                for (i, &d) in z_dofs.iter().enumerate() {
                    let bv = z_tab.values[qi][i];
                    let bg = z_tab.grads[qi][i];
                    for (k, (&tk, &tdk)) in tz.iter().zip(&tzd).enumerate() {
                        let c = z.coeffs[k][d];
                        zv += tk * c * bv;
                        zt += tdk / tau * c * bv;
                        zg[0] += tk * c * bg[0] / w;
                        zg[1] += tk * c * bg[1] / h;
                    }
                }
                let (mut wv, mut wgx, mut wgy) = (0.0, 0.0, 0.0);
                for (i, &d) in w_dofs.iter().enumerate() {
                    let bv = w_tab.values[qi][i];
                    let bg = w_tab.grads[qi][i];
                    for (k, &tk) in tw.iter().enumerate() {
                        let c = weight.coeffs[k][d];
                        wv += tk * c * bv;
                        wgx += tk * c * bg[0] / w;
                        wgy += tk * c * bg[1] / h;
                    }
                }
                acc += jxw
                    * (goal_density(x, t) * wv + params.rho * zt * wv
                        - params.eps * (wgx * zg[0] + wgy * zg[1])
                        - (vel[0] * wgx + vel[1] * wgy) * zv
                        - params.alpha * wv * zv);
            }
        }
        // Trace at the slab's right end.
        let tz1 = z.time.values(1.0);
        let tw1 = weight.time.values(1.0);
        for qi in 0..quad.space.points.len() {
            let jxw = quad.space.weights[qi] * w * h;
            let mut zm = 0.0;
            for (i, &d) in z_dofs.iter().enumerate() {
                let bv = z_tab.values[qi][i];
                for (k, &tk) in tz1.iter().enumerate() {
                    zm += tk * z.coeffs[k][d] * bv;
                }
            }
            let mut wv = 0.0;
            for (i, &d) in w_dofs.iter().enumerate() {
                let bv = w_tab.values[qi][i];
                for (k, &tk) in tw1.iter().enumerate() {
                    wv += tk * weight.coeffs[k][d] * bv;
                }
            }
            match z_next {
                Some(zn) => {
                    let mut znv = 0.0;
                    for (i, &d) in z_dofs.iter().enumerate() {
                        znv += zn[d] * z_tab.values[qi][i];
                    }
                    acc += jxw * params.rho * wv * (znv - zm);
                }
                None => {
                    acc -= jxw * params.rho * wv * zm;
                }
            }
        }
    }
    acc
}

/// Evaluation tables for the patch weight `E_2h^{2p} u - u` on one slab.
struct PatchWeight {
    patches: Vec<PatchExtrapolation>,
    basis2p: QuadBasis,
}

impl PatchWeight {
    fn build(u: &SlabField) -> Result<Self, TransportError> {
        let mut patches = Vec::with_capacity(u.coeffs.len());
        for block in &u.coeffs {
            patches.push(PatchExtrapolation::new(&u.space, block)?);
        }
        let basis2p = QuadBasis::new(2 * u.space.degree).expect("degree bounded by build");
        Ok(PatchWeight { patches, basis2p })
    }

    /// Value of `(E u - u)` at an arbitrary physical point and reference time
    /// (cross-slab trace evaluation).
    fn value_at(&self, u: &SlabField, x: [f64; 2], s: f64) -> Result<f64, TransportError> {
        let tv = u.time.values(s);
        let (cell, xi) = u
            .space
            .mesh
            .locate_point(x)
            .map_err(crate::fe::FeError::from)?;
        let mut e = 0.0;
        for (k, &tk) in tv.iter().enumerate() {
            if tk != 0.0 {
                e += tk * self.patches[k].eval(cell, xi);
            }
        }
        Ok(e - u.eval(cell, xi, s))
    }
}

/// Evaluates the localized indicators `eta_tau^n` and `eta_{h,K}^n` for a
/// primal/dual solution pair on the same slabs.
pub fn evaluate_indicators(
    set: &SlabSet,
    u: &SpaceTimeField,
    z: &SpaceTimeField,
    params: &TransportParams,
    data: &ProblemData,
    goal_density: &dyn Fn([f64; 2], f64) -> f64,
    quad: &SlabQuad,
) -> Result<ErrorIndicators, TransportError> {
    let n_slabs = set.n_slabs();
    let mut eta_tau_per_slab = Vec::with_capacity(n_slabs);
    let mut eta_h_per_cell = Vec::with_capacity(n_slabs);
    let with_supg = params.delta0 != 0.0;

    // Previous slab's patch weight for the SUPG jump of the spatial weight.
    let mut prev_patch: Option<PatchWeight> = None;

    for n in 0..n_slabs {
        let slab = &set.slabs[n];
        let uf = &u.slabs[n];
        let zf = &z.slabs[n];
        let sp = &uf.space;
        let sd = &zf.space;
        let tau = uf.tau();
        let conv = &slab.conv;

        // Temporal restriction and lift.
        let r_mat = restriction_matrix(&zf.time, &uf.time)?;
        let rz = apply_temporal_matrix(&r_mat, &zf.coeffs);
        let wz_t: Vec<Vec<f64>> = zf
            .coeffs
            .iter()
            .zip(&rz)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        let lift = extrapolation_basis(&uf.time);
        let left_coeffs: Vec<f64> = if n == 0 {
            sp.interpolate(|x| (data.initial)(x))
        } else {
            crate::fe::transfer(
                u.slabs[n - 1].coeffs.last().unwrap(),
                &u.slabs[n - 1].space,
                sp,
            )?
        };
        // Spatial restriction weight z - R_h z per temporal block.
        let mut wz_h: Vec<Vec<f64>> = Vec::with_capacity(zf.coeffs.len());
        for block in &zf.coeffs {
            let (_, back) = restrict_to_degree(sd, sp, block)?;
            wz_h.push(block.iter().zip(&back).map(|(a, b)| a - b).collect());
        }
        // Patch extrapolation weight E u - u per temporal block.
        let patch = PatchWeight::build(uf)?;

        // Traces entering from the neighbors.
        let u_prev: Option<Vec<f64>> = if n == 0 {
            None
        } else {
            Some(crate::fe::transfer(
                u.slabs[n - 1].coeffs.last().unwrap(),
                &u.slabs[n - 1].space,
                sp,
            )?)
        };
        let z_next: Option<Vec<f64>> = if n + 1 < n_slabs {
            let trace = z.slabs[n + 1].coeffs_at(0.0);
            Some(crate::fe::transfer(&trace, &z.slabs[n + 1].space, sd)?)
        } else {
            None
        };

        // Tabulated bases at the spatial quadrature points.
        let xq = &quad.space;
        let p_tab = BasisTable::tabulate(sp.basis(), &xq.points);
        let d_tab = BasisTable::tabulate(sd.basis(), &xq.points);
        let patch_tabs: Vec<BasisTable> = (0..4)
            .map(|slot| {
                let mapped: Vec<[f64; 2]> =
                    xq.points.iter().map(|&xi| child_to_parent_xi(slot, xi)).collect();
                BasisTable::tabulate(&patch.basis2p, &mapped)
            })
            .collect();

        let mut eta_tau_n = 0.0;
        let active = sp.active_cells().to_vec();
        let mut eta_h_n = vec![0.0; active.len()];

        for (ci, &cell) in active.iter().enumerate() {
            let b = sp.mesh.cell_bounds(cell);
            let (w, h) = (b.hi[0] - b.lo[0], b.hi[1] - b.lo[1]);
            let delta = if with_supg { params.delta_k(sp.mesh.cell_diameter(cell)) } else { 0.0 };
            let p_dofs = sp.cell_dofs(cell);
            let d_dofs = sd.cell_dofs(cell);
            let (patch_coeffs, slot, parent_ext) = patch.patches[0].patch_view(cell);
            let _ = patch_coeffs;
            let patch_tab = &patch_tabs[slot];
            // Per-block patch coefficient views (same parent for all blocks).
            let patch_blocks: Vec<&[f64]> =
                patch.patches.iter().map(|p| p.patch_view(cell).0).collect();

            // Gather local evaluation closures over tabulated data.
            let eval_primal_blocks = |blocks: &[Vec<f64>], qi: usize| -> (Vec<f64>, Vec<[f64; 2]>) {
                let mut vals = vec![0.0; blocks.len()];
                let mut grads = vec![[0.0; 2]; blocks.len()];
                for (i, &d) in p_dofs.iter().enumerate() {
                    let bv = p_tab.values[qi][i];
                    let bg = p_tab.grads[qi][i];
                    for (k, block) in blocks.iter().enumerate() {
                        let c = block[d];
                        vals[k] += c * bv;
                        grads[k][0] += c * bg[0] / w;
                        grads[k][1] += c * bg[1] / h;
                    }
                }
                (vals, grads)
            };
            let eval_dual_blocks = |blocks: &[Vec<f64>], qi: usize| -> (Vec<f64>, Vec<[f64; 2]>) {
                let mut vals = vec![0.0; blocks.len()];
                let mut grads = vec![[0.0; 2]; blocks.len()];
                for (i, &d) in d_dofs.iter().enumerate() {
                    let bv = d_tab.values[qi][i];
                    let bg = d_tab.grads[qi][i];
                    for (k, block) in blocks.iter().enumerate() {
                        let c = block[d];
                        vals[k] += c * bv;
                        grads[k][0] += c * bg[0] / w;
                        grads[k][1] += c * bg[1] / h;
                    }
                }
                (vals, grads)
            };

            // Volume terms.
            for (&sq, &wq) in quad.time.points.iter().zip(&quad.time.weights) {
                let t = crate::mesh::lerp(uf.t0, uf.t1, sq);
                let tu = uf.time.values(sq);
                let tud = uf.time.derivs(sq);
                let tz = zf.time.values(sq);
                let tzd = zf.time.derivs(sq);
                let tl = lift.values(sq);
                let tld = lift.derivs(sq);
                for (qi, &xi) in xq.points.iter().enumerate() {
                    let jxw = wq * tau * xq.weights[qi] * w * h;
                    let x = sp.mesh.map_to_physical(cell, xi);
                    let vel = conv.eval(cell, xi);
                    let gd = goal_density(x, t);
                    let gsrc = (data.source)(x, t);

                    // u, du/dt, grad u (+ laplacian for SUPG).
                    let (uvals, ugrads) = eval_primal_blocks(&uf.coeffs, qi);
                    let mut uv = 0.0;
                    let mut ut = 0.0;
                    let mut ug = [0.0; 2];
                    for k in 0..uvals.len() {
                        uv += tu[k] * uvals[k];
                        ut += tud[k] / tau * uvals[k];
                        ug[0] += tu[k] * ugrads[k][0];
                        ug[1] += tu[k] * ugrads[k][1];
                    }
                    // z, dz/dt, grad z.
                    let (zvals, zgrads) = eval_dual_blocks(&zf.coeffs, qi);
                    let mut zv = 0.0;
                    let mut zt = 0.0;
                    let mut zg = [0.0; 2];
                    for k in 0..zvals.len() {
                        zv += tz[k] * zvals[k];
                        zt += tzd[k] / tau * zvals[k];
                        zg[0] += tz[k] * zgrads[k][0];
                        zg[1] += tz[k] * zgrads[k][1];
                    }
                    // Temporal weights.
                    let (wzt_vals, wzt_grads) = eval_dual_blocks(&wz_t, qi);
                    let mut wzt = 0.0;
                    let mut wzt_g = [0.0; 2];
                    for k in 0..wzt_vals.len() {
                        wzt += tz[k] * wzt_vals[k];
                        wzt_g[0] += tz[k] * wzt_grads[k][0];
                        wzt_g[1] += tz[k] * wzt_grads[k][1];
                    }
                    // wu_t = E_tau u - u: lift blocks are [left, u_0..u_r].
                    let (left_val, left_grad) = {
                        let (vals, grads) = eval_primal_blocks(std::slice::from_ref(&left_coeffs), qi);
                        (vals[0], grads[0])
                    };
                    let mut wut = tl[0] * left_val - uv;
                    let mut wut_g = [tl[0] * left_grad[0] - ug[0], tl[0] * left_grad[1] - ug[1]];
                    for k in 0..uvals.len() {
                        wut += tl[k + 1] * uvals[k];
                        wut_g[0] += tl[k + 1] * ugrads[k][0];
                        wut_g[1] += tl[k + 1] * ugrads[k][1];
                    }
                    let _ = tld;
                    // Spatial weights.
                    let (wzh_vals, wzh_grads) = eval_dual_blocks(&wz_h, qi);
                    let mut wzh = 0.0;
                    let mut wzh_g = [0.0; 2];
                    for k in 0..wzh_vals.len() {
                        wzh += tz[k] * wzh_vals[k];
                        wzh_g[0] += tz[k] * wzh_grads[k][0];
                        wzh_g[1] += tz[k] * wzh_grads[k][1];
                    }
                    // wu_h = E_2h u - u via patch tables.
                    let mut e_vals = vec![0.0; uvals.len()];
                    let mut e_grads = vec![[0.0; 2]; uvals.len()];
                    let mut e_laps = vec![0.0; uvals.len()];
                    for (i, (bv, bg)) in patch_tab.values[qi]
                        .iter()
                        .zip(&patch_tab.grads[qi])
                        .enumerate()
                    {
                        let bs = patch_tab.seconds[qi][i];
                        for (k, block) in patch_blocks.iter().enumerate() {
                            let c = block[i];
                            let _ = c;
                            let cval = block[i];
                            e_vals[k] += cval * bv;
                            e_grads[k][0] += cval * bg[0] / parent_ext[0];
                            e_grads[k][1] += cval * bg[1] / parent_ext[1];
                            e_laps[k] += cval
                                * (bs[0] / (parent_ext[0] * parent_ext[0])
                                    + bs[1] / (parent_ext[1] * parent_ext[1]));
                        }
                    }
                    let mut wuh = -uv;
                    let mut wuh_g = [-ug[0], -ug[1]];
                    let mut wuh_t = -ut;
                    let mut wuh_lap = 0.0;
                    let mut u_lap = 0.0;
                    if with_supg {
                        for (i, &d) in p_dofs.iter().enumerate() {
                            let bs = p_tab.seconds[qi][i];
                            for (k, &tk) in tu.iter().enumerate() {
                                u_lap += tk
                                    * uf.coeffs[k][d]
                                    * (bs[0] / (w * w) + bs[1] / (h * h));
                            }
                        }
                        wuh_lap = -u_lap;
                    }
                    for k in 0..uvals.len() {
                        wuh += tu[k] * e_vals[k];
                        wuh_g[0] += tu[k] * e_grads[k][0];
                        wuh_g[1] += tu[k] * e_grads[k][1];
                        wuh_t += tud[k] / tau * e_vals[k];
                        if with_supg {
                            wuh_lap += tu[k] * e_laps[k];
                        }
                    }

                    // Primal residual volume parts.
                    let vol_p = |wv: f64, wg: [f64; 2]| -> f64 {
                        (gsrc - params.rho * ut - params.alpha * uv) * wv
                            - params.eps * (ug[0] * wg[0] + ug[1] * wg[1])
                            - (vel[0] * ug[0] + vel[1] * ug[1]) * wv
                    };
                    // Dual residual volume parts.
                    let vol_d = |wv: f64, wg: [f64; 2]| -> f64 {
                        gd * wv + params.rho * zt * wv
                            - params.eps * (wg[0] * zg[0] + wg[1] * zg[1])
                            - (vel[0] * wg[0] + vel[1] * wg[1]) * zv
                            - params.alpha * wv * zv
                    };
                    eta_tau_n += 0.5 * jxw * (vol_p(wzt, wzt_g) + vol_d(wut, wut_g));
                    eta_h_n[ci] += 0.5 * jxw * (vol_p(wzh, wzh_g) + vol_d(wuh, wuh_g));

                    if with_supg {
                        let bgz = vel[0] * zg[0] + vel[1] * zg[1];
                        let r_u = params.rho * ut - params.eps * u_lap
                            + (vel[0] * ug[0] + vel[1] * ug[1])
                            + params.alpha * uv
                            - gsrc;
                        // D term (full weight 1).
                        eta_h_n[ci] += jxw * delta * r_u * bgz;
                        // D' term with directions a = -wu_h, b = -wz_h.
                        let r_a = -(params.rho * wuh_t - params.eps * wuh_lap
                            + (vel[0] * wuh_g[0] + vel[1] * wuh_g[1])
                            + params.alpha * wuh);
                        let bgb = -(vel[0] * wzh_g[0] + vel[1] * wzh_g[1]);
                        eta_h_n[ci] += 0.5 * jxw * delta * (r_a * bgz + r_u * bgb);
                    }
                }
            }

            // Trace terms at the slab ends.
            let tu0 = uf.time.values(0.0);
            let tud0 = uf.time.derivs(0.0);
            let _ = tud0;
            let tz0 = zf.time.values(0.0);
            let tu1 = uf.time.values(1.0);
            let tz1 = zf.time.values(1.0);
            let tl1 = lift.values(1.0);
            for (qi, &xi) in xq.points.iter().enumerate() {
                let jxw = xq.weights[qi] * w * h;
                let x = sp.mesh.map_to_physical(cell, xi);
                let vel = conv.eval(cell, xi);

                // Left end: jump of u against the z-side weights.
                let (uvals, _) = eval_primal_blocks(&uf.coeffs, qi);
                let mut u0p = 0.0;
                for k in 0..uvals.len() {
                    u0p += tu0[k] * uvals[k];
                }
                let uprev = match &u_prev {
                    None => (data.initial)(x),
                    Some(c) => {
                        let (vals, _) = eval_primal_blocks(std::slice::from_ref(c), qi);
                        vals[0]
                    }
                };
                let jump_u = u0p - uprev;
                let (wzt_vals, _) = eval_dual_blocks(&wz_t, qi);
                let (wzh_vals, wzh_grads) = eval_dual_blocks(&wz_h, qi);
                let mut wzt0 = 0.0;
                let mut wzh0 = 0.0;
                let mut wzh0_g = [0.0; 2];
                for k in 0..wzt_vals.len() {
                    wzt0 += tz0[k] * wzt_vals[k];
                    wzh0 += tz0[k] * wzh_vals[k];
                    wzh0_g[0] += tz0[k] * wzh_grads[k][0];
                    wzh0_g[1] += tz0[k] * wzh_grads[k][1];
                }
                eta_tau_n -= 0.5 * jxw * params.rho * jump_u * wzt0;
                eta_h_n[ci] -= 0.5 * jxw * params.rho * jump_u * wzh0;

                if with_supg {
                    let delta = params.delta_k(sp.mesh.cell_diameter(cell));
                    // grad z at the left end.
                    let (zvals, zgrads) = eval_dual_blocks(&zf.coeffs, qi);
                    let mut zg0 = [0.0; 2];
                    for k in 0..zvals.len() {
                        zg0[0] += tz0[k] * zgrads[k][0];
                        zg0[1] += tz0[k] * zgrads[k][1];
                    }
                    let _ = zvals;
                    let bgz0 = vel[0] * zg0[0] + vel[1] * zg0[1];
                    // D jump part.
                    eta_h_n[ci] += jxw * delta * params.rho * jump_u * bgz0;
                    // D' jump parts: a = -wu_h.
                    let mut e0 = 0.0;
                    for (i, bv) in patch_tab.values[qi].iter().enumerate() {
                        for (k, block) in patch_blocks.iter().enumerate() {
                            e0 += tu0[k] * block[i] * bv;
                        }
                    }
                    let wuh0 = e0 - u0p;
                    let a0p = -wuh0;
                    let a_prev = match (&prev_patch, n) {
                        (Some(pp), m) if m > 0 => {
                            -pp.value_at(&u.slabs[n - 1], x, 1.0)?
                        }
                        _ => 0.0,
                    };
                    let jump_a = a0p - a_prev;
                    let bgb0 = -(vel[0] * wzh0_g[0] + vel[1] * wzh0_g[1]);
                    eta_h_n[ci] +=
                        0.5 * jxw * delta * params.rho * (jump_a * bgz0 + jump_u * bgb0);
                }

                // Right end: dual trace against the u-side weights.
                let mut u1 = 0.0;
                for k in 0..uvals.len() {
                    u1 += tu1[k] * uvals[k];
                }
                let (left_vals, _) = eval_primal_blocks(std::slice::from_ref(&left_coeffs), qi);
                let mut wut1 = tl1[0] * left_vals[0] - u1;
                for k in 0..uvals.len() {
                    wut1 += tl1[k + 1] * uvals[k];
                }
                // wu_h at the right end.
                let mut e1 = 0.0;
                for (i, bv) in patch_tab.values[qi].iter().enumerate() {
                    for (k, block) in patch_blocks.iter().enumerate() {
                        e1 += tu1[k] * block[i] * bv;
                    }
                }
                let wuh1 = e1 - u1;
                let (zvals, _) = eval_dual_blocks(&zf.coeffs, qi);
                let mut z1 = 0.0;
                for k in 0..zvals.len() {
                    z1 += tz1[k] * zvals[k];
                }
                match &z_next {
                    Some(zn) => {
                        let (znv, _) = eval_dual_blocks(std::slice::from_ref(zn), qi);
                        let jump_z = znv[0] - z1;
                        eta_tau_n += 0.5 * jxw * params.rho * wut1 * jump_z;
                        eta_h_n[ci] += 0.5 * jxw * params.rho * wuh1 * jump_z;
                    }
                    None => {
                        eta_tau_n -= 0.5 * jxw * params.rho * wut1 * z1;
                        eta_h_n[ci] -= 0.5 * jxw * params.rho * wuh1 * z1;
                    }
                }
            }
        }

        eta_tau_per_slab.push(eta_tau_n);
        eta_h_per_cell.push(eta_h_n);
        prev_patch = Some(patch);
    }

    Ok(ErrorIndicators::from_parts(eta_tau_per_slab, eta_h_per_cell))
}

/// Effectivity index `|(eta_tau + eta_h) / exact_error|`.
pub fn effectivity(eta_tau: f64, eta_h: f64, exact_error: f64) -> Option<f64> {
    (exact_error != 0.0).then(|| ((eta_tau + eta_h) / exact_error).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fe::DirichletSpec;
    use crate::mesh::{Mesh, Rect};
    use crate::stokes::Convection;
    use crate::timegrid::SlabGrid;
    use crate::transport::{solve_dual, solve_primal, TransportParams};

    fn patched_square(levels: usize) -> Arc<Mesh> {
        let mut m = Mesh::rectangle(Rect::new([0.0, 0.0], [1.0, 1.0]), 1, 1).unwrap();
        for _ in 0..levels {
            m = m.refine_global();
        }
        m
    }

    fn cone_setup(
        delta0: f64,
    ) -> (TransportParams, ProblemData) {
        let params = TransportParams { eps: 1.0, alpha: 1.0, rho: 1.0, delta0 };
        let data = crate::bench::cone_problem_data(&params, [2.0, 3.0]);
        (params, data)
    }

    fn build_set(
        mesh: &Arc<Mesh>,
        n_slabs: usize,
        p: usize,
        q: Option<usize>,
        data: &ProblemData,
    ) -> SlabSet {
        let grid = SlabGrid::uniform(0.0, 1.0, n_slabs).unwrap();
        let meshes: Vec<_> = (0..n_slabs).map(|_| Arc::clone(mesh)).collect();
        SlabSet::build(&grid, &meshes, p, q, data).unwrap()
    }

    fn random_conforming_field(
        slab: &crate::transport::Slab,
        space: &Arc<crate::fe::ScalarSpace>,
        time: &crate::timegrid::TemporalBasis,
        seed: u64,
    ) -> SlabField {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut coeffs = Vec::new();
        for _ in 0..time.n_dofs() {
            let mut c: Vec<f64> = (0..space.n_dofs())
                .map(|d| if space.dirichlet[d] { 0.0 } else { rng.gen_range(-1.0..1.0) })
                .collect();
            space.constraints.distribute(&mut c);
            // Distribution may repopulate slave dofs from Dirichlet masters;
            // the field stays conforming and zero on the boundary.
            coeffs.push(c);
        }
        SlabField {
            t0: slab.t0,
            t1: slab.t1,
            space: Arc::clone(space),
            time: time.clone(),
            coeffs,
        }
    }

    #[test]
    fn galerkin_orthogonality_of_primal_residual() {
        // delta0 = 0, constant convection: the residual must vanish on every
        // conforming discrete test function with zero boundary values.
        let mesh = patched_square(2).refine(&[5]).unwrap();
        let (params, data) = cone_setup(0.0);
        let set = build_set(&mesh, 3, 1, None, &data);
        let quad = SlabQuad::for_degrees(1, 1, None, None);
        let u = solve_primal(&set, 1, &params, &data, &quad).unwrap();
        for n in 0..3 {
            let slab = &set.slabs[n];
            let left_owned;
            let left = if n == 0 {
                LeftValue::Initial
            } else {
                left_owned = u.slabs[n - 1].coeffs.last().unwrap().clone();
                LeftValue::Coeffs(&left_owned)
            };
            for seed in 0..4 {
                let phi = random_conforming_field(slab, &slab.primal, &u.slabs[n].time, 31 * n as u64 + seed);
                let res = primal_residual(
                    &u.slabs[n],
                    match left {
                        LeftValue::Initial => LeftValue::Initial,
                        LeftValue::Coeffs(c) => LeftValue::Coeffs(c),
                    },
                    &phi,
                    &params,
                    &data,
                    &slab.conv,
                    &quad,
                    None,
                );
                assert!(res.abs() < 1e-9, "slab {n} seed {seed}: residual {res:.3e}");
            }
        }
    }

    #[test]
    fn dual_galerkin_orthogonality() {
        let mesh = patched_square(2);
        let (params, data) = cone_setup(0.0);
        let set = build_set(&mesh, 3, 1, Some(2), &data);
        let quad = SlabQuad::for_degrees(1, 1, Some(2), Some(2));
        let goal = |x: [f64; 2], t: f64| crate::bench::cone(x, t).u;
        let z = solve_dual(&set, 2, &params, &goal, &quad).unwrap();
        for n in 0..3 {
            let slab = &set.slabs[n];
            let z_next = if n + 1 < 3 {
                Some(z.slabs[n + 1].coeffs_at(0.0))
            } else {
                None
            };
            for seed in 0..4 {
                let phi = random_conforming_field(
                    slab,
                    slab.dual.as_ref().unwrap(),
                    &z.slabs[n].time,
                    77 * n as u64 + seed,
                );
                let res = dual_residual(
                    &z.slabs[n],
                    z_next.as_deref(),
                    &goal,
                    &phi,
                    &params,
                    &slab.conv,
                    &quad,
                    None,
                );
                assert!(res.abs() < 1e-9, "slab {n} seed {seed}: dual residual {res:.3e}");
            }
        }
    }

    #[test]
    fn indicators_vanish_for_fully_representable_solution() {
        // u = t * x1 is in the discrete space in both variables, so both the
        // weights and the residuals vanish to solver precision.
        let mesh = patched_square(1);
        let exact = |x: [f64; 2], t: f64| t * x[0];
        let params = TransportParams { eps: 1.0, alpha: 0.0, rho: 1.0, delta0: 0.0 };
        let data = ProblemData {
            source: Arc::new(|x: [f64; 2], t: f64| x[0] + 2.0 * t),
            initial: Arc::new(|_| 0.0),
            dirichlet_value: Arc::new(move |x, t| exact(x, t)),
            dirichlet_where: DirichletSpec::All,
            convection: Convection::constant([2.0, 3.0]),
        };
        let set = build_set(&mesh, 2, 1, Some(2), &data);
        let quad = SlabQuad::for_degrees(1, 1, Some(2), Some(2));
        let u = solve_primal(&set, 1, &params, &data, &quad).unwrap();
        let goal = |x: [f64; 2], t: f64| exact(x, t);
        let z = solve_dual(&set, 2, &params, &goal, &quad).unwrap();
        let ind = evaluate_indicators(&set, &u, &z, &params, &data, &goal, &quad).unwrap();
        assert!(ind.eta_tau.abs() < 1e-9, "eta_tau = {:.3e}", ind.eta_tau);
        assert!(ind.eta_h.abs() < 1e-9, "eta_h = {:.3e}", ind.eta_h);
    }

    #[test]
    fn totals_equal_sums_of_local_entries() {
        let mesh = patched_square(1);
        let (params, data) = cone_setup(0.0);
        let set = build_set(&mesh, 4, 1, Some(2), &data);
        let quad = SlabQuad::for_degrees(0, 1, Some(1), Some(2));
        let u = solve_primal(&set, 0, &params, &data, &quad).unwrap();
        let goal = |x: [f64; 2], t: f64| crate::bench::cone(x, t).u;
        let z = solve_dual(&set, 1, &params, &goal, &quad).unwrap();
        let ind = evaluate_indicators(&set, &u, &z, &params, &data, &goal, &quad).unwrap();
        let tau_sum: f64 = ind.eta_tau_per_slab.iter().sum();
        let h_sum: f64 = ind.eta_h_per_cell.iter().flatten().sum();
        assert!((ind.eta_tau - tau_sum).abs() <= 1e-12 * tau_sum.abs().max(1.0));
        assert!((ind.eta_h - h_sum).abs() <= 1e-12 * h_sum.abs().max(1.0));
        assert!(ind.effectivity(0.0).is_none());
    }

    #[test]
    fn eta_tau_halves_at_expected_rate() {
        // Halving every time step reduces |eta_tau| by about 2^{r+1} for a
        // smooth problem (two-level ratio measurement; dG(0) -> factor 2).
        let mesh = patched_square(2);
        let (params, data) = cone_setup(0.0);
        let quad = SlabQuad::for_degrees(0, 1, Some(1), Some(2));
        let goal = |x: [f64; 2], t: f64| crate::bench::cone(x, t).u;
        let mut etas = Vec::new();
        for n_slabs in [8, 16] {
            let set = build_set(&mesh, n_slabs, 1, Some(2), &data);
            let u = solve_primal(&set, 0, &params, &data, &quad).unwrap();
            let z = solve_dual(&set, 1, &params, &goal, &quad).unwrap();
            let ind = evaluate_indicators(&set, &u, &z, &params, &data, &goal, &quad).unwrap();
            etas.push(ind.eta_tau);
        }
        let ratio = (etas[0] / etas[1]).abs();
        assert!(
            ratio > 1.5 && ratio < 2.8,
            "temporal indicator ratio {ratio} (etas {etas:?})"
        );
    }

    #[test]
    fn supg_correction_matches_dense_oracle_on_one_cell() {
        // delta0 > 0, v constant, u linear in space and constant in time on a
        // single cell: D reduces to delta_K (rho du/dt + v.grad u + alpha u
        // - g, v.grad z), hand-computable by dense quadrature.
        let mesh = patched_square(0).refine_global(); // 4 cells, level 1
        let params = TransportParams { eps: 1.0, alpha: 0.7, rho: 1.0, delta0 : 0.05 };
        let data = ProblemData {
            source: Arc::new(|x: [f64; 2], _| 0.3 * x[0]),
            initial: Arc::new(|x| x[0]),
            dirichlet_value: Arc::new(|_, _| 0.0),
            dirichlet_where: DirichletSpec::None,
            convection: Convection::constant([2.0, -1.0]),
        };
        let set = build_set(&mesh, 1, 1, Some(2), &data);
        let quad = SlabQuad::for_degrees(0, 1, Some(1), Some(2));
        // Hand-built fields: u = x1 constant in time (dG(0)), z = x1 * x2
        // linear in time on the dual space.
        let slab = &set.slabs[0];
        let uf = SlabField {
            t0: 0.0,
            t1: 1.0,
            space: Arc::clone(&slab.primal),
            time: crate::timegrid::TemporalBasis::dg(0),
            coeffs: vec![slab.primal.interpolate(|x| x[0])],
        };
        let dual = slab.dual.as_ref().unwrap();
        let zb = dual.interpolate(|x| x[0] * x[1]);
        let zf = SlabField {
            t0: 0.0,
            t1: 1.0,
            space: Arc::clone(dual),
            time: crate::timegrid::TemporalBasis::dg(1),
            coeffs: vec![zb.iter().map(|c| 0.5 * c).collect(), zb.clone()],
        };
        let u_field = SpaceTimeField { slabs: vec![uf] };
        let z_field = SpaceTimeField { slabs: vec![zf] };
        let goal = |_: [f64; 2], _: f64| 0.0;
        let ind =
            evaluate_indicators(&set, &u_field, &z_field, &params, &data, &goal, &quad).unwrap();

        // Dense oracle for the D part on cell K0 = [0, 0.5]^2:
        // r(u) = v.grad u + alpha u - g = 2 + 0.7 x1 - 0.3 x1 (du/dt = 0,
        // lap u = 0); v.grad z(t) = T(t) * (2 x2 - x1); jump at t0:
        // rho (u0+ - u0) = 0 since u0 = x1 interpolates exactly.
        // The other eta_h pieces are checked by recomputing them with the
        // dense formulas below, so this pins only the D structure:
        let quad_t = &quad.time;
        let xq = &quad.space;
        let delta = params.delta_k(mesh.cell_diameter(mesh.cell(0).children.unwrap()[0]));
        let mut d_oracle = 0.0;
        let cell0 = set.slabs[0].primal.active_cells()[0];
        let b = mesh.cell_bounds(cell0);
        for (&sq, &wq) in quad_t.points.iter().zip(&quad_t.weights) {
            let tz = z_field.slabs[0].time.values(sq);
            for (qi, &xi) in xq.points.iter().enumerate() {
                let jxw = wq * 1.0 * xq.weights[qi] * 0.25;
                let x = [
                    crate::mesh::lerp(b.lo[0], b.hi[0], xi[0]),
                    crate::mesh::lerp(b.lo[1], b.hi[1], xi[1]),
                ];
                let r_u = 2.0 + params.alpha * x[0] - 0.3 * x[0];
                let z_t = tz[0] * 0.5 + tz[1] * 1.0;
                let bgz = z_t * (2.0 * x[1] * 1.0 + (-1.0) * x[0]);
                d_oracle += jxw * delta * r_u * bgz;
            }
        }
        // Recompute the cell's non-SUPG indicator parts with delta0 = 0 and
        // subtract: the difference must be D + D' on that cell; with u and z
        // representable, the weights wu_h, wz_h vanish (E and R reproduce
        // them), so D' contributes only through r(u) against b = -wz_h = 0
        // and a = -wu_h = 0. Hence difference == D exactly.
        let params0 = TransportParams { delta0: 0.0, ..params };
        let ind0 =
            evaluate_indicators(&set, &u_field, &z_field, &params0, &data, &goal, &quad).unwrap();
        let d_measured = ind.eta_h_per_cell[0][0] - ind0.eta_h_per_cell[0][0];
        assert!(
            (d_measured - d_oracle).abs() < 1e-12,
            "D mismatch: {d_measured} vs {d_oracle}"
        );
    }
}
