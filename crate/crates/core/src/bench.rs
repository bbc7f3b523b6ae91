//! Benchmark problem definitions: the rotating-cone manufactured solution,
//! the channel transport scenario, convergence/adaptivity runners and their
//! tables.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptivity::{dwr_loop_full, AdaptivityConfig, DwrOutcome, GoalSpec, ThetaSpec};
use crate::fe::DirichletSpec;
use crate::mesh::{Mesh, MeshError, Rect};
use crate::stokes::{solve_stokes_problem, Convection, StokesBc, StokesConfig, StokesError};
use crate::timegrid::SlabGrid;
use crate::transport::{
    l2l2_error, solve_primal, ProblemData, SlabQuad, SlabSet, SpaceTimeFn, TransportError,
    TransportParams,
};
use crate::vtk::VtkSnapshot;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown scenario '{0}' (expected example1, example2 or custom)")]
    UnknownScenario(String),
    #[error("unknown mode '{0}' (expected global or adaptive)")]
    UnknownMode(String),
    #[error("scenario '{scenario}' does not support mode '{mode}'")]
    ModeUnsupported { scenario: String, mode: String },
    #[error("malformed discretization spec '{0}' (expected e.g. cg1-dg1)")]
    BadDegrees(String),
    #[error("csv parse error: {0}")]
    Csv(String),
    #[error("transport error: {0}")]
    Transport(#[from] TransportError),
    #[error("stokes error: {0}")]
    Stokes(#[from] StokesError),
    #[error("mesh error: {0}")]
    Mesh(#[from] MeshError),
    #[error("time error: {0}")]
    Time(#[from] crate::timegrid::TimeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(#[from] serde_json::Error),
}

/// Value and derivatives of the rotating-cone solution at `(x, t)`.
#[derive(Debug, Clone, Copy)]
pub struct ConeEval {
    pub u: f64,
    pub du_dt: f64,
    pub grad: [f64; 2],
    pub laplacian: f64,
}

/// The rotating cone: a moving inverse-quadratic bump centered on a circle of
/// radius 1/4 around (1/2, 1/2), with an orientation/height factor that flips
/// sign while passing t = 0.25 and t = 0.75 within each unit period.
pub fn cone(x: [f64; 2], t: f64) -> ConeEval {
    const A: f64 = 50.0;
    const S: f64 = -1.0 / 3.0;
    let two_pi = 2.0 * std::f64::consts::PI;
    let m = [
        0.5 + 0.25 * (two_pi * t).cos(),
        0.5 + 0.25 * (two_pi * t).sin(),
    ];
    let m_dot = [
        -0.25 * two_pi * (two_pi * t).sin(),
        0.25 * two_pi * (two_pi * t).cos(),
    ];
    let dx = x[0] - m[0];
    let dy = x[1] - m[1];
    let r2 = dx * dx + dy * dy;
    let d = 1.0 + A * r2;
    let u1 = 1.0 / d;
    let du1_dx = -2.0 * A * dx / (d * d);
    let du1_dy = -2.0 * A * dy / (d * d);
    let lap_u1 = -4.0 * A / (d * d) + 8.0 * A * A * r2 / (d * d * d);
    let du1_dt = 2.0 * A * (dx * m_dot[0] + dy * m_dot[1]) / (d * d);

    // Periodic extension: that = t - floor(t).
    let that = t - t.floor();
    let (nu1, nu2) = if that < 0.5 {
        (-1.0, 5.0 * std::f64::consts::PI * (4.0 * that - 1.0))
    } else {
        (1.0, 5.0 * std::f64::consts::PI * (4.0 * (that - 0.5) - 1.0))
    };
    let u2 = nu1 * S * nu2.atan();
    let du2_dt = nu1 * S * 20.0 * std::f64::consts::PI / (1.0 + nu2 * nu2);

    ConeEval {
        u: u1 * u2,
        du_dt: du1_dt * u2 + u1 * du2_dt,
        grad: [du1_dx * u2, du1_dy * u2],
        laplacian: lap_u1 * u2,
    }
}

/// Transport data manufactured from the cone for a given convection field and
/// coefficient set: `g = rho du/dt - eps lap u + v . grad u + alpha u`.
pub fn cone_problem_data(params: &TransportParams, convection: [f64; 2]) -> ProblemData {
    let p = *params;
    ProblemData {
        source: Arc::new(move |x, t| {
            let c = cone(x, t);
            p.rho * c.du_dt - p.eps * c.laplacian
                + convection[0] * c.grad[0]
                + convection[1] * c.grad[1]
                + p.alpha * c.u
        }),
        initial: Arc::new(|x| cone(x, 0.0).u),
        dirichlet_value: Arc::new(|x, t| cone(x, t).u),
        dirichlet_where: DirichletSpec::All,
        convection: Convection::constant(convection),
    }
}

/// Parameters of the two rotating-cone studies: diffusion-dominated
/// (`eps = 1`, no stabilization) and convection-dominated
/// (`eps = 1e-6`, `delta0 = 0.1`); both use `alpha = 1`, `rho = 1`.
pub fn example1_params(convection_dominated: bool) -> TransportParams {
    if convection_dominated {
        TransportParams { eps: 1e-6, alpha: 1.0, rho: 1.0, delta0: 0.1 }
    } else {
        TransportParams { eps: 1.0, alpha: 1.0, rho: 1.0, delta0: 0.0 }
    }
}

/// Unit-square mesh built as `level` global refinements of a single root
/// cell, so every active cell has a parent patch (level >= 1).
pub fn example1_mesh(level: usize) -> Arc<Mesh> {
    let mut m = Mesh::rectangle(Rect::new([0.0, 0.0], [1.0, 1.0]), 1, 1).unwrap();
    for _ in 0..level {
        m = m.refine_global();
    }
    m
}

/// The channel domain of the flow-coupled scenario: two unit squares joined
/// by a constraint that restricts the height by a factor of five.
pub fn channel_rects() -> [Rect; 3] {
    [
        Rect::new([-1.0, -0.5], [0.0, 0.5]),
        Rect::new([0.0, -0.1], [1.0, 0.1]),
        Rect::new([1.0, -0.5], [2.0, 0.5]),
    ]
}

/// Resolved run configuration; flat keys so a JSON config file mirrors the
/// CLI flags one to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: String,
    pub mode: String,
    pub eps: f64,
    pub alpha: f64,
    pub rho: f64,
    pub nu: f64,
    pub delta0: f64,
    /// Primal degrees: cG(p)-dG(r).
    pub p: usize,
    pub r: usize,
    /// Dual degrees: cG(q)-dG(s) (adaptive mode).
    pub q: usize,
    pub s: usize,
    /// Refinement levels for global mode.
    pub levels: usize,
    /// Adaptive loop count.
    pub max_loops: usize,
    /// Initial slab count (example1/custom; example2 derives it from tau0).
    pub slabs0: usize,
    /// Initial time step of the channel scenario.
    pub tau0: f64,
    /// Root cell side of the channel transport lattice (the first slab mesh
    /// is one global refinement finer).
    pub channel_h: f64,
    /// Root cell side of the Stokes lattice.
    pub stokes_h: f64,
    /// Fixed marking fractions; absent means automatic balancing.
    pub theta_tau: Option<f64>,
    pub theta_h: Option<f64>,
    pub tolerance: f64,
    pub vtk_times: Vec<f64>,
}

impl RunConfig {
    pub fn example1() -> RunConfig {
        RunConfig {
            scenario: "example1".into(),
            mode: "global".into(),
            eps: 1.0,
            alpha: 1.0,
            rho: 1.0,
            nu: 1.0,
            delta0: 0.0,
            p: 1,
            r: 1,
            q: 2,
            s: 2,
            levels: 3,
            max_loops: 6,
            slabs0: 4,
            tau0: 0.25,
            channel_h: 0.05,
            stokes_h: 0.05,
            theta_tau: None,
            theta_h: None,
            tolerance: 1e-8,
            vtk_times: Vec::new(),
        }
    }

    pub fn example2() -> RunConfig {
        RunConfig {
            scenario: "example2".into(),
            mode: "adaptive".into(),
            eps: 1e-4,
            alpha: 0.0,
            rho: 1.0,
            nu: 1.0,
            delta0: 0.0,
            p: 1,
            r: 1,
            q: 2,
            s: 2,
            levels: 1,
            max_loops: 9,
            slabs0: 25,
            tau0: 0.1,
            channel_h: 0.05,
            stokes_h: 0.05,
            theta_tau: None,
            theta_h: None,
            tolerance: 1e-8,
            vtk_times: Vec::new(),
        }
    }

    pub fn defaults_for(scenario: &str) -> Result<RunConfig, BenchError> {
        match scenario {
            "example1" | "custom" => {
                let mut c = RunConfig::example1();
                c.scenario = scenario.into();
                Ok(c)
            }
            "example2" => Ok(RunConfig::example2()),
            other => Err(BenchError::UnknownScenario(other.into())),
        }
    }

    fn adaptivity(&self) -> AdaptivityConfig {
        AdaptivityConfig {
            theta: match (self.theta_tau, self.theta_h) {
                (Some(tt), Some(th)) => ThetaSpec::Fixed { tau_top: tt, h_top: th, h_bottom: 0.0 },
                _ => ThetaSpec::Auto,
            },
            max_loops: self.max_loops,
            tolerance: self.tolerance,
            r: self.r,
            p: self.p,
            s: self.s,
            q: self.q,
        }
    }
}

/// A rectangular results table with exact-roundtrip CSV emission.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Table {
        Table {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(s: &str) -> Result<Table, BenchError> {
        let mut lines = s.lines();
        let header = lines.next().ok_or_else(|| BenchError::Csv("empty file".into()))?;
        let columns: Vec<String> = header.split(',').map(|c| c.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(',').map(|c| c.to_string()).collect();
            if row.len() != columns.len() {
                return Err(BenchError::Csv(format!(
                    "row has {} fields, expected {}",
                    row.len(),
                    columns.len()
                )));
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    /// Column values parsed as floats (empty cells skipped).
    pub fn column_f64(&self, name: &str) -> Vec<Option<f64>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .unwrap_or_else(|| panic!("no column {name}"));
        self.rows
            .iter()
            .map(|r| {
                let cell = &r[idx];
                (!cell.is_empty()).then(|| cell.parse().expect("numeric cell"))
            })
            .collect()
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Experimental order of convergence between consecutive errors.
pub fn eoc(prev: f64, current: f64) -> f64 {
    -(current / prev).log2()
}

/// Global-refinement convergence study of the rotating-cone problem:
/// one row per level with the `L2(L2)` error and its EOC.
pub fn run_example1_global(config: &RunConfig) -> Result<Table, BenchError> {
    let params = TransportParams {
        eps: config.eps,
        alpha: config.alpha,
        rho: config.rho,
        delta0: config.delta0,
    };
    let data = cone_problem_data(&params, [2.0, 3.0]);
    let mut table = Table::new(&["level", "N", "N_K", "N_dof_tot", "error", "EOC"]);
    let mut prev_err: Option<f64> = None;
    for level in 1..=config.levels {
        let mesh = example1_mesh(level);
        let n_slabs = config.slabs0 * (1 << (level - 1));
        let grid = SlabGrid::uniform(0.0, 1.0, n_slabs)?;
        let meshes: Vec<_> = (0..n_slabs).map(|_| Arc::clone(&mesh)).collect();
        let set = SlabSet::build(&grid, &meshes, config.p, None, &data)?;
        let quad = SlabQuad::for_degrees(config.r, config.p, None, None);
        let u = solve_primal(&set, config.r, &params, &data, &quad)?;
        let err = l2l2_error(&u, &|x, t| cone(x, t).u, config.r + 2, config.p + 2);
        let row_eoc = prev_err.map(|p| fmt_f64(eoc(p, err))).unwrap_or_default();
        table.push_row(vec![
            level.to_string(),
            n_slabs.to_string(),
            mesh.n_active_cells().to_string(),
            set.total_dofs(config.r).to_string(),
            fmt_f64(err),
            row_eoc,
        ]);
        prev_err = Some(err);
    }
    Ok(table)
}

/// Goal-oriented adaptive run of the rotating-cone problem.
pub fn run_example1_adaptive(config: &RunConfig) -> Result<(Table, DwrOutcome), BenchError> {
    let params = TransportParams {
        eps: config.eps,
        alpha: config.alpha,
        rho: config.rho,
        delta0: config.delta0,
    };
    let data = cone_problem_data(&params, [2.0, 3.0]);
    let mesh = example1_mesh(1);
    let grid = SlabGrid::uniform(0.0, 1.0, config.slabs0)?;
    let exact: SpaceTimeFn = Arc::new(|x, t| cone(x, t).u);
    let outcome = dwr_loop_full(
        &grid,
        &mesh,
        &params,
        &data,
        &GoalSpec::L2ErrorControl(exact),
        &config.adaptivity(),
    )?;
    let mut table = Table::new(&[
        "loop",
        "N",
        "N_K_max",
        "N_dof_tot",
        "error",
        "EOC",
        "eta_h",
        "eta_tau",
        "eta_tauh",
        "I_eff",
    ]);
    let mut prev_err: Option<f64> = None;
    for rec in &outcome.records {
        let err = rec.exact_error.expect("example1 has a reference solution");
        let row_eoc = prev_err.map(|p| fmt_f64(eoc(p, err))).unwrap_or_default();
        table.push_row(vec![
            rec.loop_index.to_string(),
            rec.n_slabs.to_string(),
            rec.max_cells.to_string(),
            rec.total_dofs.to_string(),
            fmt_f64(err),
            row_eoc,
            fmt_f64(rec.eta_h),
            fmt_f64(rec.eta_tau),
            fmt_f64(rec.eta_tau + rec.eta_h),
            rec.effectivity.map(fmt_f64).unwrap_or_default(),
        ]);
        prev_err = Some(err);
    }
    Ok((table, outcome))
}

/// The channel flow and transport scenario, fully assembled: meshes, slab
/// grid, Stokes-driven convection and boundary data.
pub struct ChannelSetup {
    pub mesh0: Arc<Mesh>,
    pub grid: SlabGrid,
    pub params: TransportParams,
    pub data: ProblemData,
    /// Peak convection speed sampled at the constraint midpoint.
    pub peak_speed: f64,
}

/// Solves the channel Stokes problem and builds the transport data of the
/// flow-coupled scenario.
pub fn channel_setup(config: &RunConfig) -> Result<ChannelSetup, BenchError> {
    // Transport lattice, refined once so patch recovery is available.
    let mesh0 = Mesh::union_of_rects(&channel_rects(), config.channel_h)?.refine_global();
    let n_slabs = (2.5_f64 / config.tau0).round() as usize;
    let grid = SlabGrid::uniform(0.0, 2.5, n_slabs.max(1))?;

    // Stokes on its own fixed mesh: unit-magnitude parabolic inflow on the
    // left, no-slip walls, do-nothing outflow on the right.
    let stokes_mesh = Mesh::union_of_rects(&channel_rects(), config.stokes_h)?.refine_global();
    let stokes_cfg = StokesConfig::taylor_hood(
        config.nu,
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
    let flow = solve_stokes_problem(&stokes_mesh, &stokes_cfg)?;
    let peak_speed = flow.velocity_at([0.5, 0.0])?[0];

    let params = TransportParams {
        eps: config.eps,
        alpha: config.alpha,
        rho: config.rho,
        delta0: config.delta0,
    };
    let data = ProblemData {
        source: Arc::new(|_, _| 0.0),
        initial: Arc::new(|_| 0.0),
        dirichlet_value: Arc::new(|x: [f64; 2], t: f64| {
            if x[0] < -1.0 + 1e-9 && x[1].abs() < 0.25 {
                16.0 * (0.25 - x[1]) * (x[1] + 0.25) * (100.0 * t).min(0.1)
            } else {
                0.0
            }
        }),
        dirichlet_where: DirichletSpec::Where(Arc::new(|m: [f64; 2]| m[0] < 2.0 - 1e-9)),
        convection: Convection::Stokes(Arc::new(flow)),
    };
    Ok(ChannelSetup {
        mesh0,
        grid,
        params,
        data,
        peak_speed,
    })
}

/// Adaptive run of the channel scenario; returns the per-loop table and the
/// final solution for snapshot output.
pub fn run_example2(config: &RunConfig) -> Result<(Table, DwrOutcome), BenchError> {
    let setup = channel_setup(config)?;
    let outcome = dwr_loop_full(
        &setup.grid,
        &setup.mesh0,
        &setup.params,
        &setup.data,
        &GoalSpec::NormalizedAverage,
        &config.adaptivity(),
    )?;
    let mut table = Table::new(&["loop", "N", "N_K_tot", "N_K_max", "goal"]);
    for rec in &outcome.records {
        table.push_row(vec![
            rec.loop_index.to_string(),
            rec.n_slabs.to_string(),
            rec.total_cells.to_string(),
            rec.max_cells.to_string(),
            fmt_f64(rec.goal_value),
        ]);
    }
    Ok((table, outcome))
}

/// Writes `snap_<t>.vtk` files of the final primal solution.
pub fn write_snapshots(
    outcome: &DwrOutcome,
    times: &[f64],
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>, BenchError> {
    let mut written = Vec::new();
    for &t in times {
        let Some(n) = outcome.final_primal.slab_containing(t) else {
            continue;
        };
        let f = &outcome.final_primal.slabs[n];
        let coeffs = f.coeffs_at(f.ref_time(t));
        let snap = VtkSnapshot::from_field(&f.space, &coeffs, &format!("u at t={t}"));
        let path = out_dir.join(format!("snap_{t}.vtk"));
        snap.write(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Dispatches a full run: solves, writes `table.csv`, `run.json` and any
/// requested snapshots into `out_dir`, and returns the table.
pub fn run(config: &RunConfig, out_dir: Option<&Path>) -> Result<Table, BenchError> {
    match config.mode.as_str() {
        "global" | "adaptive" => {}
        other => return Err(BenchError::UnknownMode(other.into())),
    }
    let (table, outcome) = match (config.scenario.as_str(), config.mode.as_str()) {
        ("example1", "global") | ("custom", "global") => (run_example1_global(config)?, None),
        ("example1", "adaptive") | ("custom", "adaptive") => {
            let (t, o) = run_example1_adaptive(config)?;
            (t, Some(o))
        }
        ("example2", "adaptive") => {
            let (t, o) = run_example2(config)?;
            (t, Some(o))
        }
        ("example2", mode) => {
            return Err(BenchError::ModeUnsupported {
                scenario: "example2".into(),
                mode: mode.into(),
            })
        }
        (scenario, _) => return Err(BenchError::UnknownScenario(scenario.into())),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("table.csv"), table.to_csv())?;
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(config)?)?;
        if let Some(outcome) = &outcome {
            write_snapshots(outcome, &config.vtk_times, dir)?;
        }
    }
    Ok(table)
}

/// Parses a `cg<p>-dg<r>` discretization label.
pub fn parse_degrees(spec: &str) -> Result<(usize, usize), BenchError> {
    let lower = spec.to_ascii_lowercase();
    let (cg, dg) = lower
        .split_once('-')
        .ok_or_else(|| BenchError::BadDegrees(spec.into()))?;
    let p = cg
        .strip_prefix("cg")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| BenchError::BadDegrees(spec.into()))?;
    let r = dg
        .strip_prefix("dg")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| BenchError::BadDegrees(spec.into()))?;
    Ok((p, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cone_apex_values() {
        // At t = 0 the cone apex sits at (0.75, 0.5): u1 = 1 there, and
        // u2(0) = (1/3) arctan(-5 pi) (direct scalar evaluation).
        let c = cone([0.75, 0.5], 0.0);
        let u2 = (1.0 / 3.0) * (-(5.0 * std::f64::consts::PI)).atan();
        assert!((c.u - u2).abs() < 1e-12);
        assert!((c.u - (-0.50240)).abs() < 1e-5);
    }

    #[test]
    fn cone_orientation_flips_across_quarter_period() {
        let before = cone([0.5 + 0.25 * 0.0, 0.75], 0.2499).u;
        let after = cone([0.5, 0.75], 0.2501).u;
        // Just before t=0.25 the arctan argument is slightly negative, just
        // after slightly positive: the apex value changes sign.
        let apex_before = cone(
            [0.5 + 0.25 * (2.0 * std::f64::consts::PI * 0.2499).cos(),
             0.5 + 0.25 * (2.0 * std::f64::consts::PI * 0.2499).sin()],
            0.2499,
        )
        .u;
        let apex_after = cone(
            [0.5 + 0.25 * (2.0 * std::f64::consts::PI * 0.2501).cos(),
             0.5 + 0.25 * (2.0 * std::f64::consts::PI * 0.2501).sin()],
            0.2501,
        )
        .u;
        assert!(apex_before < 0.0 && apex_after > 0.0);
        let _ = (before, after);
    }

    #[test]
    fn cone_derivatives_match_finite_differences() {
        let h = 1e-6;
        for (x, t) in [([0.3, 0.7], 0.13), ([0.6, 0.4], 0.61), ([0.52, 0.55], 0.9)] {
            let c = cone(x, t);
            let fd_t = (cone(x, t + h).u - cone(x, t - h).u) / (2.0 * h);
            assert!((c.du_dt - fd_t).abs() < 1e-5, "du_dt at {x:?},{t}");
            let fd_x = (cone([x[0] + h, x[1]], t).u - cone([x[0] - h, x[1]], t).u) / (2.0 * h);
            let fd_y = (cone([x[0], x[1] + h], t).u - cone([x[0], x[1] - h], t).u) / (2.0 * h);
            assert!((c.grad[0] - fd_x).abs() < 1e-5);
            assert!((c.grad[1] - fd_y).abs() < 1e-5);
            let lap_fd = (cone([x[0] + h, x[1]], t).u + cone([x[0] - h, x[1]], t).u
                + cone([x[0], x[1] + h], t).u
                + cone([x[0], x[1] - h], t).u
                - 4.0 * c.u)
                / (h * h);
            assert!((c.laplacian - lap_fd).abs() < 1e-2);
        }
    }

    #[test]
    fn cone_u1_is_one_at_apex() {
        // The interpolation example: the bump factor alone is 1 at the apex.
        let c = cone([0.75, 0.5], 0.0);
        let u2 = (1.0 / 3.0) * (-(5.0 * std::f64::consts::PI)).atan();
        assert!((c.u / u2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let mut t = Table::new(&["a", "b", "EOC"]);
        t.push_row(vec!["1".into(), fmt_f64(8.747e-2), String::new()]);
        t.push_row(vec!["2".into(), fmt_f64(1.0 / 3.0), fmt_f64(1.6512345678901234)]);
        let parsed = Table::from_csv(&t.to_csv()).unwrap();
        assert_eq!(parsed, t);
        // Numeric cells parse back to bit-identical values.
        let col = parsed.column_f64("b");
        assert_eq!(col[1].unwrap().to_bits(), (1.0_f64 / 3.0).to_bits());
    }

    #[test]
    fn parse_degree_specs() {
        assert_eq!(parse_degrees("cg1-dg1").unwrap(), (1, 1));
        assert_eq!(parse_degrees("cG2-dG0").unwrap(), (2, 0));
        assert!(parse_degrees("q2p1").is_err());
    }

    #[test]
    fn global_table_has_exact_eoc_column() {
        let mut cfg = RunConfig::example1();
        cfg.levels = 2;
        cfg.r = 0;
        let table = run_example1_global(&cfg).unwrap();
        assert_eq!(table.rows.len(), 2);
        let errs = table.column_f64("error");
        let eocs = table.column_f64("EOC");
        assert!(eocs[0].is_none());
        let recomputed = eoc(errs[0].unwrap(), errs[1].unwrap());
        assert!((recomputed - eocs[1].unwrap()).abs() < 1e-12);
    }

    #[test]
    fn run_rejects_bad_scenario_and_mode() {
        let mut cfg = RunConfig::example1();
        cfg.scenario = "example3".into();
        assert!(matches!(run(&cfg, None), Err(BenchError::UnknownScenario(_))));
        let mut cfg = RunConfig::example2();
        cfg.mode = "global".into();
        assert!(matches!(run(&cfg, None), Err(BenchError::ModeUnsupported { .. })));
    }

    #[test]
    fn channel_smoke_single_loop() {
        // Coarse channel: one adaptive loop end to end, including the Stokes
        // solve, with outputs written to a temp directory.
        let mut cfg = RunConfig::example2();
        cfg.channel_h = 0.1;
        cfg.stokes_h = 0.1;
        cfg.max_loops = 1;
        cfg.vtk_times = vec![1.25];
        let setup = channel_setup(&cfg).unwrap();
        assert_eq!(setup.grid.n_slabs(), 25);
        assert_eq!(setup.mesh0.n_active_cells(), 880);
        assert!((setup.peak_speed - 5.0).abs() / 5.0 < 0.05);
        let dir = std::env::temp_dir().join("stdwr_channel_smoke");
        let table = run(&cfg, Some(&dir)).unwrap();
        assert_eq!(table.rows.len(), 1);
        let goal = table.column_f64("goal")[0].unwrap();
        assert!(goal > 0.0 && goal < 1.0, "goal {goal}");
        assert!(dir.join("table.csv").exists());
        assert!(dir.join("run.json").exists());
        assert!(dir.join("snap_1.25.vtk").exists());
        // The configuration echo parses back.
        let echoed: RunConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
        assert_eq!(echoed.scenario, "example2");
        // Zero-inflow variant: the goal value collapses to zero.
        let mut zero_cfg = cfg.clone();
        zero_cfg.max_loops = 1;
        let mut setup0 = channel_setup(&zero_cfg).unwrap();
        setup0.data.dirichlet_value = Arc::new(|_, _| 0.0);
        let outcome = crate::adaptivity::dwr_loop_full(
            &setup0.grid,
            &setup0.mesh0,
            &setup0.params,
            &setup0.data,
            &GoalSpec::NormalizedAverage,
            &zero_cfg.adaptivity(),
        )
        .unwrap();
        assert!(outcome.records[0].goal_value.abs() < 1e-12);
    }
}
