//! Space-time adaptive finite element solver for convection-dominated
//! transport coupled with a stationary Stokes flow.
//!
//! The crate provides:
//!
//! - hierarchical quadrilateral meshes with hanging-node refinement ([`mesh`]),
//! - continuous Lagrange `Q_p` spaces with constraint handling and the
//!   spatial weight operators of goal-oriented error estimation ([`fe`]),
//! - dG(r) time slabs and the temporal weight operators ([`timegrid`]),
//! - sparse assembly with constraint condensation and a direct solver
//!   ([`linalg`]),
//! - a Taylor-Hood Stokes solver supplying the convection field ([`stokes`]),
//! - the SUPG-stabilized space-time transport solver, primal and dual
//!   ([`transport`]),
//! - dual-weighted residual error indicators split into temporal and spatial
//!   contributions ([`dwr`]),
//! - marking strategies and the adaptive refinement loop ([`adaptivity`]),
//! - benchmark problem definitions, tables and VTK output ([`bench`]).

pub mod adaptivity;
pub mod bench;
pub mod dwr;
pub mod fe;
pub mod linalg;
pub mod mesh;
pub mod stokes;
pub mod timegrid;
pub mod transport;
pub mod vtk;
