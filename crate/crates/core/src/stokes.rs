//! Stationary Stokes flow on its own fixed mesh with inf-sup stable
//! Taylor-Hood pairs, providing the convection field for the transport
//! problem.

use std::sync::Arc;

use thiserror::Error;

use crate::fe::{build_space, ConstraintSet, DirichletSpec, QuadratureRule, ScalarSpace};
use crate::linalg::{solve_direct, LinalgError, SparseMatrix, SystemBuilder};
use crate::mesh::Mesh;

#[derive(Debug, Error)]
pub enum StokesError {
    #[error("velocity degree {0} with pressure degree {1} is not inf-sup stable (need p_v >= p_p + 1)")]
    UnstablePair(usize, usize),
    #[error("fe error: {0}")]
    Fe(#[from] crate::fe::FeError),
    #[error("linear solve failed: {0}")]
    Solve(#[from] LinalgError),
    #[error("point ({0}, {1}) outside the flow domain")]
    OutsideDomain(f64, f64),
}

pub type VectorFn = Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>;

/// Velocity boundary conditions; faces are classified by their midpoints.
#[derive(Clone)]
pub enum StokesBc {
    /// Dirichlet velocity on the whole boundary; the pressure mean is pinned
    /// by a scalar Lagrange multiplier.
    AllDirichlet(VectorFn),
    /// Dirichlet where the predicate holds, natural (do-nothing) elsewhere.
    Mixed {
        value: VectorFn,
        is_dirichlet: Arc<dyn Fn([f64; 2]) -> bool + Send + Sync>,
    },
}

#[derive(Clone)]
pub struct StokesConfig {
    pub nu: f64,
    pub v_degree: usize,
    pub p_degree: usize,
    pub bc: StokesBc,
    pub body_force: Option<VectorFn>,
}

impl StokesConfig {
    /// Q2-Q1 Taylor-Hood with the given viscosity.
    pub fn taylor_hood(nu: f64, bc: StokesBc) -> Self {
        StokesConfig {
            nu,
            v_degree: 2,
            p_degree: 1,
            bc,
            body_force: None,
        }
    }
}

/// Assembled saddle-point system with its block layout.
pub struct StokesSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    v_space: Arc<ScalarSpace>,
    p_space: Arc<ScalarSpace>,
    nu: f64,
    /// Lagrange multiplier dof for the pressure mean, if present.
    multiplier: Option<usize>,
}

/// Discrete velocity/pressure pair on its own mesh.
pub struct StokesField {
    pub v_space: Arc<ScalarSpace>,
    pub p_space: Arc<ScalarSpace>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub pressure: Vec<f64>,
    pub nu: f64,
}

impl StokesField {
    /// Pointwise velocity evaluation at a physical point.
    pub fn velocity_at(&self, x: [f64; 2]) -> Result<[f64; 2], StokesError> {
        let (cell, xi) = self
            .v_space
            .mesh
            .locate_point(x)
            .map_err(|_| StokesError::OutsideDomain(x[0], x[1]))?;
        Ok([
            self.v_space.eval(&self.vx, cell, xi),
            self.v_space.eval(&self.vy, cell, xi),
        ])
    }

    pub fn pressure_at(&self, x: [f64; 2]) -> Result<f64, StokesError> {
        self.p_space
            .eval_at(&self.pressure, x)
            .map_err(|_| StokesError::OutsideDomain(x[0], x[1]))
    }

    /// Maximal discrete divergence residual `(div v_h, chi_h)` over all
    /// pressure test functions (unit-normalized), a direct check of the
    /// second block equation.
    pub fn divergence_residual(&self) -> f64 {
        let quad = QuadratureRule::gauss(self.v_space.degree + 2);
        let mut res = vec![0.0; self.p_space.n_dofs()];
        for &cell in self.v_space.active_cells() {
            let b = self.v_space.mesh.cell_bounds(cell);
            let (w, h) = (b.hi[0] - b.lo[0], b.hi[1] - b.lo[1]);
            let vdofs = self.v_space.cell_dofs(cell);
            let pdofs = self.p_space.cell_dofs(cell);
            for (q, &xi) in quad.points.iter().enumerate() {
                let jxw = quad.weights[q] * w * h;
                let mut div = 0.0;
                for (i, &d) in vdofs.iter().enumerate() {
                    let g = self.v_space.basis().grad(i, xi);
                    div += self.vx[d] * g[0] / w + self.vy[d] * g[1] / h;
                }
                for (i, &d) in pdofs.iter().enumerate() {
                    res[d] += jxw * div * self.p_space.basis().value(i, xi);
                }
            }
        }
        res.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Assembles the Taylor-Hood saddle-point system
/// `nu (grad v, grad psi) - (p, div psi) + (div v, chi) = (f, psi)`.
pub fn assemble_stokes(mesh: &Arc<Mesh>, config: &StokesConfig) -> Result<StokesSystem, StokesError> {
    if config.v_degree < config.p_degree + 1 {
        return Err(StokesError::UnstablePair(config.v_degree, config.p_degree));
    }
    let (dirichlet_spec, value): (DirichletSpec, VectorFn) = match &config.bc {
        StokesBc::AllDirichlet(v) => (DirichletSpec::All, Arc::clone(v)),
        StokesBc::Mixed { value, is_dirichlet } => (
            DirichletSpec::Where(Arc::clone(is_dirichlet)),
            Arc::clone(value),
        ),
    };
    let v_space = build_space(mesh, config.v_degree, &dirichlet_spec)?;
    let p_space = build_space(mesh, config.p_degree, &DirichletSpec::None)?;
    let nv = v_space.n_dofs();
    let np = p_space.n_dofs();
    let pure_dirichlet = matches!(config.bc, StokesBc::AllDirichlet(_));
    let n = 2 * nv + np + usize::from(pure_dirichlet);
    let multiplier = pure_dirichlet.then_some(2 * nv + np);

    // Block-offset constraints and velocity Dirichlet pins.
    let mut constraints = ConstraintSet::default();
    for (slave, masters) in v_space.constraints.iter() {
        for off in [0, nv] {
            constraints.insert_offset(slave + off, masters, off);
        }
    }
    for (slave, masters) in p_space.constraints.iter() {
        constraints.insert_offset(slave + 2 * nv, masters, 2 * nv);
    }
    let mut pinned = Vec::new();
    for d in 0..nv {
        if v_space.dirichlet[d] {
            let g = value(v_space.dof_coords[d]);
            pinned.push((d, g[0]));
            pinned.push((d + nv, g[1]));
        }
    }

    let mut sb = SystemBuilder::new(n, &constraints, &pinned);
    let quad = QuadratureRule::gauss(config.v_degree + 2);
    for &cell in v_space.active_cells() {
        let b = mesh.cell_bounds(cell);
        let (w, h) = (b.hi[0] - b.lo[0], b.hi[1] - b.lo[1]);
        let vdofs = v_space.cell_dofs(cell);
        let pdofs = p_space.cell_dofs(cell);
        let nvl = vdofs.len();
        let npl = pdofs.len();
        let mut k_local = vec![0.0; nvl * nvl];
        let mut bx_local = vec![0.0; npl * nvl];
        let mut by_local = vec![0.0; npl * nvl];
        let mut fx_local = vec![0.0; nvl];
        let mut fy_local = vec![0.0; nvl];
        for (q, &xi) in quad.points.iter().enumerate() {
            let jxw = quad.weights[q] * w * h;
            let (vv, vg) = v_space.basis().eval_all(xi);
            let pv: Vec<f64> = (0..npl).map(|i| p_space.basis().value(i, xi)).collect();
            let phys_g: Vec<[f64; 2]> = vg.iter().map(|g| [g[0] / w, g[1] / h]).collect();
            for i in 0..nvl {
                for j in 0..nvl {
                    k_local[i * nvl + j] += jxw
                        * config.nu
                        * (phys_g[i][0] * phys_g[j][0] + phys_g[i][1] * phys_g[j][1]);
                }
            }
            for i in 0..npl {
                for j in 0..nvl {
                    bx_local[i * nvl + j] += jxw * pv[i] * phys_g[j][0];
                    by_local[i * nvl + j] += jxw * pv[i] * phys_g[j][1];
                }
            }
            if let Some(f) = &config.body_force {
                let x = mesh.map_to_physical(cell, xi);
                let fv = f(x);
                for i in 0..nvl {
                    fx_local[i] += jxw * fv[0] * vv[i];
                    fy_local[i] += jxw * fv[1] * vv[i];
                }
            }
        }
        for (i, &di) in vdofs.iter().enumerate() {
            for (j, &dj) in vdofs.iter().enumerate() {
                sb.add_entry(di, dj, k_local[i * nvl + j]);
                sb.add_entry(di + nv, dj + nv, k_local[i * nvl + j]);
            }
            sb.add_rhs(di, fx_local[i]);
            sb.add_rhs(di + nv, fy_local[i]);
        }
        for (i, &pi) in pdofs.iter().enumerate() {
            for (j, &vj) in vdofs.iter().enumerate() {
                // (div v, chi) rows and -(p, div psi) columns.
                sb.add_entry(2 * nv + pi, vj, bx_local[i * nvl + j]);
                sb.add_entry(2 * nv + pi, vj + nv, by_local[i * nvl + j]);
                sb.add_entry(vj, 2 * nv + pi, -bx_local[i * nvl + j]);
                sb.add_entry(vj + nv, 2 * nv + pi, -by_local[i * nvl + j]);
            }
        }
    }
    if let Some(mult) = multiplier {
        // Zero-mean pressure gauge: one symmetric multiplier row/column.
        let quad = QuadratureRule::gauss(config.p_degree + 1);
        for &cell in p_space.active_cells() {
            let b = mesh.cell_bounds(cell);
            let jac = (b.hi[0] - b.lo[0]) * (b.hi[1] - b.lo[1]);
            for (i, &pi) in p_space.cell_dofs(cell).iter().enumerate() {
                let mass: f64 = quad
                    .points
                    .iter()
                    .zip(&quad.weights)
                    .map(|(&xi, &w)| w * jac * p_space.basis().value(i, xi))
                    .sum();
                sb.add_entry(2 * nv + pi, mult, mass);
                sb.add_entry(mult, 2 * nv + pi, mass);
            }
        }
    }
    let (matrix, rhs) = sb.build()?;
    Ok(StokesSystem {
        matrix,
        rhs,
        v_space,
        p_space,
        nu: config.nu,
        multiplier,
    })
}

/// Solves an assembled Stokes system.
pub fn solve_stokes(system: &StokesSystem) -> Result<StokesField, StokesError> {
    let x = solve_direct(&system.matrix, &system.rhs)?;
    let nv = system.v_space.n_dofs();
    let np = system.p_space.n_dofs();
    let mut vx = x[0..nv].to_vec();
    let mut vy = x[nv..2 * nv].to_vec();
    let mut pressure = x[2 * nv..2 * nv + np].to_vec();
    system.v_space.constraints.distribute(&mut vx);
    system.v_space.constraints.distribute(&mut vy);
    system.p_space.constraints.distribute(&mut pressure);
    let _ = system.multiplier;
    Ok(StokesField {
        v_space: Arc::clone(&system.v_space),
        p_space: Arc::clone(&system.p_space),
        vx,
        vy,
        pressure,
        nu: system.nu,
    })
}

/// Convenience: assemble and solve in one call.
pub fn solve_stokes_problem(mesh: &Arc<Mesh>, config: &StokesConfig) -> Result<StokesField, StokesError> {
    solve_stokes(&assemble_stokes(mesh, config)?)
}

/// Convection field for the transport problem: either a closed-form velocity
/// or a solved Stokes field evaluated across meshes.
#[derive(Clone)]
pub enum Convection {
    Analytic(VectorFn),
    Stokes(Arc<StokesField>),
}

impl Convection {
    pub fn constant(v: [f64; 2]) -> Convection {
        Convection::Analytic(Arc::new(move |_| v))
    }

    pub fn eval(&self, x: [f64; 2]) -> Result<[f64; 2], StokesError> {
        match self {
            Convection::Analytic(f) => Ok(f(x)),
            Convection::Stokes(field) => field.velocity_at(x),
        }
    }
}

impl ConstraintSet {
    /// Inserts a constraint with all indices shifted by a block offset.
    fn insert_offset(&mut self, slave: usize, masters: &[(usize, f64)], offset: usize) {
        let shifted: Vec<(usize, f64)> = masters.iter().map(|&(m, w)| (m + offset, w)).collect();
        self.insert_raw(slave, shifted);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Rect;

    fn unit_square(n: usize) -> Arc<Mesh> {
        Mesh::rectangle(Rect::new([0.0, 0.0], [1.0, 1.0]), n, n).unwrap()
    }

    fn poiseuille_config() -> StokesConfig {
        // Parabolic inflow on the left, no-slip top/bottom, do-nothing right.
        StokesConfig::taylor_hood(
            1.0,
            StokesBc::Mixed {
                value: Arc::new(|x: [f64; 2]| {
                    if x[0] < 1e-12 {
                        [4.0 * x[1] * (1.0 - x[1]), 0.0]
                    } else {
                        [0.0, 0.0]
                    }
                }),
                is_dirichlet: Arc::new(|m: [f64; 2]| m[0] < 1.0 - 1e-9),
            },
        )
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let mesh = unit_square(3);
        let cfg = StokesConfig::taylor_hood(1.0, StokesBc::AllDirichlet(Arc::new(|_| [0.0, 0.0])));
        let f = solve_stokes_problem(&mesh, &cfg).unwrap();
        assert!(f.vx.iter().chain(&f.vy).all(|&v| v.abs() < 1e-12));
        assert!(f.pressure.iter().all(|&p| p.abs() < 1e-10));
    }

    #[test]
    fn unstable_pair_rejected() {
        let mesh = unit_square(2);
        let mut cfg = poiseuille_config();
        cfg.v_degree = 1;
        cfg.p_degree = 1;
        assert!(matches!(
            assemble_stokes(&mesh, &cfg),
            Err(StokesError::UnstablePair(1, 1))
        ));
    }

    #[test]
    fn poiseuille_is_exact_for_q2_q1() {
        // v = (4y(1-y), 0), p = 8 - 8x lie in the discrete spaces.
        for n in [2, 4] {
            let mesh = unit_square(n);
            let f = solve_stokes_problem(&mesh, &poiseuille_config()).unwrap();
            for (d, &x) in f.v_space.dof_coords.iter().enumerate() {
                assert!((f.vx[d] - 4.0 * x[1] * (1.0 - x[1])).abs() < 1e-10, "n={n}");
                assert!(f.vy[d].abs() < 1e-10);
            }
            for (d, &x) in f.p_space.dof_coords.iter().enumerate() {
                assert!((f.pressure[d] - (8.0 - 8.0 * x[0])).abs() < 1e-9, "n={n}");
            }
            assert!(f.divergence_residual() < 1e-9);
        }
    }

    #[test]
    fn no_slip_walls_evaluate_to_zero() {
        let mesh = unit_square(4);
        let f = solve_stokes_problem(&mesh, &poiseuille_config()).unwrap();
        let v = f.velocity_at([0.37, 0.0]).unwrap();
        assert!(v[0].abs() < 1e-10 && v[1].abs() < 1e-10);
        let mid = f.velocity_at([0.5, 0.5]).unwrap();
        assert!((mid[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn velocity_independent_of_viscosity() {
        let mesh = unit_square(4);
        let mut cfg = poiseuille_config();
        let f1 = solve_stokes_problem(&mesh, &cfg).unwrap();
        cfg.nu = 10.0;
        let f10 = solve_stokes_problem(&mesh, &cfg).unwrap();
        for (a, b) in f1.vx.iter().zip(&f10.vx).chain(f1.vy.iter().zip(&f10.vy)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn coupling_blocks_are_mutual_transposes() {
        let mesh = unit_square(3);
        let sys = assemble_stokes(&mesh, &poiseuille_config()).unwrap();
        let nv = sys.v_space.n_dofs();
        let np = sys.p_space.n_dofs();
        // For free dofs, entry (v_i, p_j) must equal -(p_j, v_i).
        for r in 0..2 * nv {
            let (cols, vals) = sys.matrix.row(r);
            for (c, v) in cols.iter().zip(vals) {
                if *c >= 2 * nv && *c < 2 * nv + np {
                    let (tcols, tvals) = sys.matrix.row(*c);
                    let vt = tcols
                        .iter()
                        .zip(tvals)
                        .find(|(tc, _)| **tc == r)
                        .map(|(_, tv)| *tv)
                        .unwrap_or(0.0);
                    assert!((v + vt).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn pure_dirichlet_pressure_has_zero_mean() {
        let mesh = unit_square(3);
        let cfg = StokesConfig {
            nu: 1.0,
            v_degree: 2,
            p_degree: 1,
            bc: StokesBc::AllDirichlet(Arc::new(|_| [0.0, 0.0])),
            body_force: Some(Arc::new(|x: [f64; 2]| [x[1] - 0.5, 0.0])),
        };
        let f = solve_stokes_problem(&mesh, &cfg).unwrap();
        // Quadrature of the pressure mean.
        let quad = QuadratureRule::gauss(3);
        let mut mean = 0.0;
        for &cell in f.p_space.active_cells() {
            let b = mesh.cell_bounds(cell);
            let jac = (b.hi[0] - b.lo[0]) * (b.hi[1] - b.lo[1]);
            for (&xi, &w) in quad.points.iter().zip(&quad.weights) {
                mean += w * jac * f.p_space.eval(&f.pressure, cell, xi);
            }
        }
        assert!(mean.abs() < 1e-10);
        assert!(f.divergence_residual() < 1e-9);
        // The forcing is nontrivial, so the flow is too.
        assert!(f.vx.iter().any(|&v| v.abs() > 1e-6));
    }

    #[test]
    fn channel_peak_speed_near_five() {
        // Flux conservation oracle: unit-magnitude parabolic inflow through
        // the height-1 inlet carries flux 2/3; the height-0.2 constraint
        // forces a mean of 10/3 and a parabolic peak of 5.
        let rects = [
            Rect::new([-1.0, -0.5], [0.0, 0.5]),
            Rect::new([0.0, -0.1], [1.0, 0.1]),
            Rect::new([1.0, -0.5], [2.0, 0.5]),
        ];
        let mesh = Mesh::union_of_rects(&rects, 0.05).unwrap();
        let cfg = StokesConfig::taylor_hood(
            1.0,
            StokesBc::Mixed {
                value: Arc::new(|x: [f64; 2]| {
                    if x[0] < -1.0 + 1e-9 {
                        [1.0 - 4.0 * x[1] * x[1], 0.0]
                    } else {
                        [0.0, 0.0]
                    }
                }),
                is_dirichlet: Arc::new(|m: [f64; 2]| m[0] < 2.0 - 1e-9),
            },
        );
        let f = solve_stokes_problem(&mesh, &cfg).unwrap();
        let peak = f.velocity_at([0.5, 0.0]).unwrap()[0];
        assert!((peak - 5.0).abs() / 5.0 < 0.05, "peak {peak}");
        assert!(f.divergence_residual() < 1e-9);
        let zero = solve_stokes_problem(
            &mesh,
            &StokesConfig::taylor_hood(
                1.0,
                StokesBc::Mixed {
                    value: Arc::new(|_| [0.0, 0.0]),
                    is_dirichlet: Arc::new(|m: [f64; 2]| m[0] < 2.0 - 1e-9),
                },
            ),
        )
        .unwrap();
        assert!(zero.vx.iter().chain(&zero.vy).all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn analytic_convection_is_constant() {
        let conv = Convection::constant([2.0, 3.0]);
        for p in [[0.1, 0.9], [0.5, 0.5]] {
            assert_eq!(conv.eval(p).unwrap(), [2.0, 3.0]);
        }
    }
}
