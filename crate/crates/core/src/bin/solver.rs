//! Command-line front end for the convergence and adaptivity studies.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;

use spacetime_dwr::bench::{parse_degrees, run, RunConfig};

/// Space-time adaptive transport solver with goal-oriented error control.
#[derive(Parser, Debug)]
#[command(name = "solver", version, about)]
struct Cli {
    /// Scenario: example1 (rotating cone), example2 (channel), custom.
    scenario: String,
    /// global (uniform refinement study) or adaptive (DWR loop).
    #[arg(long)]
    mode: Option<String>,
    /// Primal discretization, e.g. cg1-dg1.
    #[arg(long)]
    primal: Option<String>,
    /// Dual discretization, e.g. cg2-dg2 (adaptive mode).
    #[arg(long)]
    dual: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    delta0: Option<f64>,
    /// Refinement levels for global mode.
    #[arg(long)]
    levels: Option<usize>,
    /// Loop count for adaptive mode.
    #[arg(long)]
    max_loops: Option<usize>,
    /// Initial slab count (example1/custom).
    #[arg(long)]
    slabs0: Option<usize>,
    /// Initial time step of the channel scenario.
    #[arg(long)]
    tau0: Option<f64>,
    /// Root cell side of the channel transport lattice.
    #[arg(long)]
    channel_h: Option<f64>,
    /// Root cell side of the Stokes lattice.
    #[arg(long)]
    stokes_h: Option<f64>,
    /// Fixed temporal marking fraction (omit for automatic balancing).
    #[arg(long)]
    theta_tau: Option<f64>,
    /// Fixed spatial marking fraction (omit for automatic balancing).
    #[arg(long)]
    theta_h: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Output directory for table.csv, run.json and snapshots.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Snapshot times, comma separated.
    #[arg(long, value_delimiter = ',')]
    vtk_times: Option<Vec<f64>>,
    /// JSON config file with flat RunConfig keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::defaults_for(&cli.scenario)?,
    };
    cfg.scenario = cli.scenario.clone();

    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    if let Some(primal) = &cli.primal {
        let (p, r) = parse_degrees(primal)?;
        cfg.p = p;
        cfg.r = r;
        // Keep the dual degrees admissible unless set explicitly.
        if cli.dual.is_none() {
            cfg.q = p + 1;
            cfg.s = r + 1;
        }
    }
    if let Some(dual) = &cli.dual {
        let (q, s) = parse_degrees(dual)?;
        cfg.q = q;
        cfg.s = s;
    }
    macro_rules! overlay {
        ($($field:ident),*) => {
            $(if let Some(v) = cli.$field { cfg.$field = v; })*
        };
    }
    overlay!(eps, alpha, rho, nu, delta0, levels, max_loops, slabs0, tau0, channel_h, stokes_h, tolerance);
    if cli.theta_tau.is_some() {
        cfg.theta_tau = cli.theta_tau;
    }
    if cli.theta_h.is_some() {
        cfg.theta_h = cli.theta_h;
    }
    if let Some(times) = cli.vtk_times {
        cfg.vtk_times = times;
    }
    if cfg.mode == "adaptive" && (cfg.q <= cfg.p || cfg.s <= cfg.r) {
        bail!(
            "dual degrees must exceed primal degrees: got cg{}-dg{} over cg{}-dg{}",
            cfg.q,
            cfg.s,
            cfg.p,
            cfg.r
        );
    }

    let t0 = std::time::Instant::now();
    let table = run(&cfg, cli.out.as_deref())?;
    let elapsed = t0.elapsed().as_secs_f64();

    // Pretty print to stdout; the CSV on disk keeps full precision.
    let widths: Vec<usize> = table
        .columns
        .iter()
        .enumerate()
        .map(|(i, c)| {
            table
                .rows
                .iter()
                .map(|r| r[i].len().min(13))
                .chain(std::iter::once(c.len()))
                .max()
                .unwrap()
        })
        .collect();
    let header: Vec<String> = table
        .columns
        .iter()
        .zip(&widths)
        .map(|(c, w)| format!("{c:>w$}"))
        .collect();
    println!("{}", header.join("  "));
    for row in &table.rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(v, w)| {
                let shown = if v.len() > 13 {
                    v.parse::<f64>().map(|f| format!("{f:.6e}")).unwrap_or_else(|_| v.clone())
                } else {
                    v.clone()
                };
                format!("{shown:>w$}")
            })
            .collect();
        println!("{}", cells.join("  "));
    }
    eprintln!("done in {elapsed:.1}s");
    if let Some(out) = &cli.out {
        eprintln!("outputs in {}", out.display());
    }
    Ok(())
}
