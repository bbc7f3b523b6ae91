// Quick anchor comparison against the adaptive reference values.
use std::sync::Arc;
use spacetime_dwr::adaptivity::*;
use spacetime_dwr::mesh::{Mesh, Rect};
use spacetime_dwr::timegrid::SlabGrid;
use spacetime_dwr::transport::SpaceTimeFn;

fn main() {
    let mesh = Mesh::rectangle(Rect::new([0.0, 0.0], [1.0, 1.0]), 1, 1)
        .unwrap()
        .refine_global();
    let params = spacetime_dwr::bench::example1_params(false);
    let data = spacetime_dwr::bench::cone_problem_data(&params, [2.0, 3.0]);
    let grid = SlabGrid::uniform(0.0, 1.0, 4).unwrap();
    let config = AdaptivityConfig {
        theta: ThetaSpec::Auto, max_loops: 10, tolerance: 1e-12,
        r: 0, p: 1, s: 1, q: 2,
    };
    let exact: SpaceTimeFn = Arc::new(|x, t| spacetime_dwr::bench::cone(x, t).u);
    let recs = dwr_loop(&grid, &mesh, &params, &data, &GoalSpec::L2ErrorControl(exact), &config).unwrap();
    println!("l  N  NKmax  Ndof  error      eta_h      eta_tau    Ieff");
    for r in &recs {
        println!(
            "{}  {}  {}  {}  {:.4e}  {:+.4e}  {:+.4e}  {:.3}",
            r.loop_index, r.n_slabs, r.max_cells, r.total_dofs,
            r.exact_error.unwrap(), r.eta_h, r.eta_tau,
            r.effectivity.unwrap_or(f64::NAN)
        );
    }
    println!("reference loop1: err 7.1588e-2, eta_h +5.6668e-2, eta_tau +1.9391e-2, Ieff 1.062");
}
