//! Marking strategies, automatic space/time balancing and the full
//! goal-oriented adaptive refinement loop.

use std::sync::Arc;

use crate::dwr::evaluate_indicators;
use crate::mesh::Mesh;
use crate::timegrid::SlabGrid;
use crate::transport::{
    l2l2_error, l2l2_norm, solve_dual, solve_primal, spacetime_inner, ProblemData, SlabQuad,
    SlabSet, SpaceTimeFn, TransportError, TransportParams,
};

/// Marking fractions: automatic error balancing or fixed values.
#[derive(Debug, Clone, Copy)]
pub enum ThetaSpec {
    /// `theta_x^top = 0.5 * min{|eta_x / (eta_h + eta_tau)|, 1}` per family.
    Auto,
    Fixed {
        tau_top: f64,
        h_top: f64,
        h_bottom: f64,
    },
}

#[derive(Debug, Clone)]
pub struct AdaptivityConfig {
    pub theta: ThetaSpec,
    pub max_loops: usize,
    /// Convergence tolerance for the estimator total and the goal increment.
    pub tolerance: f64,
    /// Primal degrees: dG(r) in time, cG(p) in space.
    pub r: usize,
    pub p: usize,
    /// Dual degrees; must satisfy `s > r`, `q > p`.
    pub s: usize,
    pub q: usize,
}

impl AdaptivityConfig {
    pub fn validate(&self) -> Result<(), TransportError> {
        if self.s <= self.r || self.q <= self.p {
            return Err(TransportError::DualDegrees);
        }
        if self.max_loops == 0 {
            return Err(TransportError::Empty);
        }
        Ok(())
    }
}

/// What the solver produced on one adaptive loop.
#[derive(Debug, Clone)]
pub struct LoopRecord {
    pub loop_index: usize,
    pub n_slabs: usize,
    pub max_cells: usize,
    pub total_cells: usize,
    pub total_dofs: usize,
    /// Value of the goal functional at the primal solution.
    pub goal_value: f64,
    /// Exact goal error when a reference solution is available.
    pub exact_error: Option<f64>,
    pub eta_tau: f64,
    pub eta_h: f64,
    pub effectivity: Option<f64>,
}

/// Goal functionals of the benchmark studies.
#[derive(Clone)]
pub enum GoalSpec {
    /// `J(phi) = (1/||u - u_h||) int (phi, u - u_h) dt`: the normalized
    /// functional controlling the global `L2(L2)` error against a reference
    /// solution. The normalization is recomputed from the current solution
    /// once per loop, so `J` is a fixed linear functional within a loop.
    L2ErrorControl(SpaceTimeFn),
    /// `J(phi) = (1/||u_h||) int (phi, u_h) dt`: normalized solution average;
    /// its value at the solution is the `L2(L2)` norm itself.
    NormalizedAverage,
}

/// Balancing fractions of the marking step; `None` signals convergence
/// (both indicator families are zero).
pub fn balance_fractions(eta_tau: f64, eta_h: f64) -> Option<(f64, f64)> {
    if eta_tau == 0.0 && eta_h == 0.0 {
        return None;
    }
    let denom = eta_h + eta_tau;
    let frac = |num: f64| 0.5 * (num / denom).abs().min(1.0);
    Some((frac(eta_tau), frac(eta_h)))
}

/// Indices of the `ceil(theta * N)` slabs with the largest `|eta_tau^n|`;
/// ties resolve to the lower slab index.
pub fn mark_temporal(eta_tau_per_slab: &[f64], theta: f64) -> Vec<usize> {
    let n = eta_tau_per_slab.len();
    let count = (theta * n as f64).ceil() as usize;
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eta_tau_per_slab[b]
            .abs()
            .total_cmp(&eta_tau_per_slab[a].abs())
            .then(a.cmp(&b))
    });
    let mut marked: Vec<usize> = order[..count].to_vec();
    marked.sort_unstable();
    marked
}

/// Positions of the top/bottom fractions per slab by `|eta_{h,K}^n|`. The
/// bottom set is recorded for coarsening bookkeeping but not executed.
pub struct SpatialMarks {
    /// Per slab: positions (indices into the indicator slice) to refine.
    pub refine: Vec<Vec<usize>>,
    /// Per slab: positions in the bottom fraction (coarsening candidates).
    pub coarsen: Vec<Vec<usize>>,
}

pub fn mark_spatial(
    eta_h_per_cell: &[Vec<f64>],
    theta_top: f64,
    theta_bottom: f64,
) -> SpatialMarks {
    let mut refine = Vec::with_capacity(eta_h_per_cell.len());
    let mut coarsen = Vec::with_capacity(eta_h_per_cell.len());
    for etas in eta_h_per_cell {
        let n = etas.len();
        let top = ((theta_top * n as f64).ceil() as usize).min(n);
        let bottom = ((theta_bottom * n as f64).ceil() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| etas[b].abs().total_cmp(&etas[a].abs()).then(a.cmp(&b)));
        let mut top_set: Vec<usize> = order[..top].to_vec();
        top_set.sort_unstable();
        let mut bottom_set: Vec<usize> = if bottom == 0 {
            Vec::new()
        } else {
            order[n - bottom..].to_vec()
        };
        bottom_set.sort_unstable();
        refine.push(top_set);
        coarsen.push(bottom_set);
    }
    SpatialMarks { refine, coarsen }
}

/// Records plus the discretization and primal solution of the last loop.
pub struct DwrOutcome {
    pub records: Vec<LoopRecord>,
    pub final_set: SlabSet,
    pub final_primal: crate::transport::SpaceTimeField,
}

/// Runs the goal-oriented space-time adaptive loop: primal solve, goal
/// evaluation, dual solve, indicator evaluation, balanced marking, spatial
/// refinement with smoothing, temporal bisection. The flow field is fixed;
/// it enters through `data.convection`.
pub fn dwr_loop(
    grid0: &SlabGrid,
    mesh0: &Arc<Mesh>,
    params: &TransportParams,
    data: &ProblemData,
    goal: &GoalSpec,
    config: &AdaptivityConfig,
) -> Result<Vec<LoopRecord>, TransportError> {
    Ok(dwr_loop_full(grid0, mesh0, params, data, goal, config)?.records)
}

/// Like [`dwr_loop`] but also returns the final discretization and solution
/// (for snapshot output).
pub fn dwr_loop_full(
    grid0: &SlabGrid,
    mesh0: &Arc<Mesh>,
    params: &TransportParams,
    data: &ProblemData,
    goal: &GoalSpec,
    config: &AdaptivityConfig,
) -> Result<DwrOutcome, TransportError> {
    config.validate()?;
    let quad = SlabQuad::for_degrees(config.r, config.p, Some(config.s), Some(config.q));
    let norm_tq = config.s + 2;
    let norm_xq = config.q + 2;

    let mut grid = grid0.clone();
    let mut meshes: Vec<Arc<Mesh>> = (0..grid.n_slabs()).map(|_| Arc::clone(mesh0)).collect();
    let mut records: Vec<LoopRecord> = Vec::new();
    let mut last_state: Option<(SlabSet, crate::transport::SpaceTimeField)> = None;

    for loop_index in 1..=config.max_loops {
        let set = SlabSet::build(&grid, &meshes, config.p, Some(config.q), data)?;
        let u = solve_primal(&set, config.r, params, data, &quad)?;

        // Fix the goal functional for this loop.
        let (goal_value, exact_error, norm) = match goal {
            GoalSpec::L2ErrorControl(exact) => {
                let err = l2l2_error(&u, &|x, t| exact(x, t), norm_tq, norm_xq);
                let jval = spacetime_inner(
                    &u,
                    &|x, t| (exact(x, t) - u.eval_at(x, t).unwrap_or(0.0)) / err,
                    norm_tq,
                    norm_xq,
                );
                (jval, Some(err), err)
            }
            GoalSpec::NormalizedAverage => {
                let norm = l2l2_norm(&u, norm_tq, norm_xq);
                (norm, None, norm)
            }
        };
        let goal_density = |x: [f64; 2], t: f64| -> f64 {
            if norm == 0.0 {
                return 0.0;
            }
            match goal {
                GoalSpec::L2ErrorControl(exact) => {
                    (exact(x, t) - u.eval_at(x, t).unwrap_or(0.0)) / norm
                }
                GoalSpec::NormalizedAverage => u.eval_at(x, t).unwrap_or(0.0) / norm,
            }
        };

        let z = solve_dual(&set, config.s, params, &goal_density, &quad)?;
        let ind = evaluate_indicators(&set, &u, &z, params, data, &goal_density, &quad)?;

        records.push(LoopRecord {
            loop_index,
            n_slabs: set.n_slabs(),
            max_cells: set.max_cells(),
            total_cells: set.total_cells(),
            total_dofs: set.total_dofs(config.r),
            goal_value,
            exact_error,
            eta_tau: ind.eta_tau,
            eta_h: ind.eta_h,
            effectivity: exact_error.and_then(|e| ind.effectivity(e)),
        });

        let mut stop = loop_index == config.max_loops || ind.total().abs() <= config.tolerance;
        if !stop && records.len() >= 2 {
            let j1 = records[records.len() - 1].goal_value;
            let j0 = records[records.len() - 2].goal_value;
            stop = (j1 - j0).abs() <= config.tolerance * j1.abs();
        }
        let fractions = if stop {
            None
        } else {
            match config.theta {
                ThetaSpec::Auto => balance_fractions(ind.eta_tau, ind.eta_h).map(|(tt, th)| (tt, th, 0.0)),
                ThetaSpec::Fixed { tau_top, h_top, h_bottom } => Some((tau_top, h_top, h_bottom)),
            }
        };

        if let Some((theta_tau, theta_h, theta_h_bottom)) = fractions {
            // Spatial refinement with 1-irregularity smoothing, per slab.
            let marks = mark_spatial(&ind.eta_h_per_cell, theta_h, theta_h_bottom);
            let mut new_meshes = Vec::with_capacity(meshes.len());
            for (n, mesh) in meshes.iter().enumerate() {
                let active = set.slabs[n].primal.active_cells();
                let cell_ids: Vec<usize> = marks.refine[n].iter().map(|&pos| active[pos]).collect();
                new_meshes.push(mesh.refine(&cell_ids)?);
            }

            // Temporal bisection; the two children inherit the refined mesh.
            let temporal = mark_temporal(&ind.eta_tau_per_slab, theta_tau);
            grid = grid.bisect(&temporal)?;
            let mut expanded = Vec::with_capacity(grid.n_slabs());
            for (n, mesh) in new_meshes.into_iter().enumerate() {
                if temporal.binary_search(&n).is_ok() {
                    expanded.push(Arc::clone(&mesh));
                }
                expanded.push(mesh);
            }
            meshes = expanded;
            debug_assert_eq!(meshes.len(), grid.n_slabs());
        } else {
            stop = true;
        }

        last_state = Some((set, u));
        if stop {
            break;
        }
    }

    let (final_set, final_primal) = last_state.expect("at least one loop ran");
    Ok(DwrOutcome {
        records,
        final_set,
        final_primal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Rect;
    use proptest::prelude::*;

    #[test]
    fn balance_symmetric_case() {
        let (tt, th) = balance_fractions(1.0, 1.0).unwrap();
        assert!((tt - 0.25).abs() < 1e-15 && (th - 0.25).abs() < 1e-15);
    }

    #[test]
    fn balance_formula_evaluation() {
        let (tt, th) = balance_fractions(1.0, 3.0).unwrap();
        assert!((th - 0.375).abs() < 1e-15);
        assert!((tt - 0.125).abs() < 1e-15);
    }

    #[test]
    fn balance_min_clamp_engages_for_signed_inputs() {
        let (tt, th) = balance_fractions(1.0, -2.0).unwrap();
        assert!((th - 0.5).abs() < 1e-15);
        assert!((tt - 0.5).abs() < 1e-15);
    }

    #[test]
    fn balance_signals_convergence() {
        assert!(balance_fractions(0.0, 0.0).is_none());
    }

    #[test]
    fn temporal_marking_examples() {
        assert!(mark_temporal(&[1.0, 2.0], 0.0).is_empty());
        let marked = mark_temporal(&[0.1, 0.4, 0.2, 0.3], 0.5);
        assert_eq!(marked, vec![1, 3]);
        let marked = mark_temporal(&[0.5, 0.5, 0.5, 0.5], 0.25);
        assert_eq!(marked, vec![0]);
    }

    #[test]
    fn spatial_marking_examples() {
        let etas = vec![vec![1.0, 2.0, 3.0, 4.0]];
        assert!(mark_spatial(&etas, 0.0, 0.0).refine[0].is_empty());
        let m = mark_spatial(&etas, 0.5, 0.0);
        assert_eq!(m.refine[0], vec![2, 3]);
        let m = mark_spatial(&etas, 1.0, 0.0);
        assert_eq!(m.refine[0], vec![0, 1, 2, 3]);
        // Bottom fraction is recorded but separate.
        let m = mark_spatial(&etas, 0.25, 0.25);
        assert_eq!(m.refine[0], vec![3]);
        assert_eq!(m.coarsen[0], vec![0]);
    }

    proptest! {
        #[test]
        fn marked_set_size_is_ceil_theta_n(
            etas in proptest::collection::vec(-1.0e3_f64..1.0e3, 1..40),
            theta in 0.0_f64..1.0,
            scale in 1.0e-6_f64..1.0e6,
        ) {
            let marked = mark_temporal(&etas, theta);
            let expected = ((theta * etas.len() as f64).ceil() as usize).min(etas.len());
            prop_assert_eq!(marked.len(), expected);
            // Invariance under positive rescaling of all indicators.
            let scaled: Vec<f64> = etas.iter().map(|&e| e * scale).collect();
            prop_assert_eq!(marked, mark_temporal(&scaled, theta));
        }
    }

    #[test]
    fn single_loop_matches_direct_solve() {
        let mesh = {
            let mut m = Mesh::rectangle(Rect::new([0.0, 0.0], [1.0, 1.0]), 1, 1).unwrap();
            m = m.refine_global();
            m
        };
        let params = crate::bench::example1_params(false);
        let data = crate::bench::cone_problem_data(&params, [2.0, 3.0]);
        let grid = SlabGrid::uniform(0.0, 1.0, 4).unwrap();
        let config = AdaptivityConfig {
            theta: ThetaSpec::Auto,
            max_loops: 1,
            tolerance: 1e-8,
            r: 0,
            p: 1,
            s: 1,
            q: 2,
        };
        let exact: SpaceTimeFn = Arc::new(|x, t| crate::bench::cone(x, t).u);
        let records = dwr_loop(
            &grid,
            &mesh,
            &params,
            &data,
            &GoalSpec::L2ErrorControl(exact.clone()),
            &config,
        )
        .unwrap();
        assert_eq!(records.len(), 1);
        let rec = &records[0];
        assert_eq!(rec.n_slabs, 4);
        assert_eq!(rec.max_cells, 4);
        assert_eq!(rec.total_dofs, 36);
        // Direct solve oracle for the exact error.
        let meshes: Vec<_> = (0..4).map(|_| Arc::clone(&mesh)).collect();
        let set = SlabSet::build(&grid, &meshes, 1, Some(2), &data).unwrap();
        let quad = SlabQuad::for_degrees(0, 1, Some(1), Some(2));
        let u = solve_primal(&set, 0, &params, &data, &quad).unwrap();
        let err = l2l2_error(&u, &|x, t| crate::bench::cone(x, t).u, 3, 4);
        assert!((rec.exact_error.unwrap() - err).abs() < 1e-12);
    }

    #[test]
    fn loop_is_deterministic_and_monotone_in_size() {
        let mesh = {
            let mut m = Mesh::rectangle(Rect::new([0.0, 0.0], [1.0, 1.0]), 1, 1).unwrap();
            m = m.refine_global();
            m
        };
        let params = crate::bench::example1_params(false);
        let data = crate::bench::cone_problem_data(&params, [2.0, 3.0]);
        let grid = SlabGrid::uniform(0.0, 1.0, 4).unwrap();
        let config = AdaptivityConfig {
            theta: ThetaSpec::Auto,
            max_loops: 3,
            tolerance: 1e-12,
            r: 0,
            p: 1,
            s: 1,
            q: 2,
        };
        let exact: SpaceTimeFn = Arc::new(|x, t| crate::bench::cone(x, t).u);
        let goal = GoalSpec::L2ErrorControl(exact);
        let a = dwr_loop(&grid, &mesh, &params, &data, &goal, &config).unwrap();
        let b = dwr_loop(&grid, &mesh, &params, &data, &goal, &config).unwrap();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.goal_value.to_bits(), rb.goal_value.to_bits());
            assert_eq!(ra.eta_tau.to_bits(), rb.eta_tau.to_bits());
            assert_eq!(ra.eta_h.to_bits(), rb.eta_h.to_bits());
            assert_eq!(ra.total_dofs, rb.total_dofs);
        }
        for w in a.windows(2) {
            assert!(w[1].n_slabs >= w[0].n_slabs);
            assert!(w[1].total_dofs >= w[0].total_dofs);
        }
    }
}
