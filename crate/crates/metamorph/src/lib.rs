//! Metamorph: design toolkit for bistable planar spring-linkage structures.
//!
//! Two user-supplied planar target curves are turned into a single
//! hinged-bar linkage with embedded linear springs, optimized so both target
//! forms are statically stable energy minima, then validated with a
//! constraint-stabilized rigid-body forward simulator.
//!
//! Pipeline stages, each also exposed as a CLI subcommand:
//!
//! 1. [`geometry`] — sample the curves and fit rigid bar chains to them.
//! 2. [`spring_placement`] — iteratively add minimal-energy springs guided
//!    by modal analysis, calling into [`stability_opt`] after each addition.
//! 3. [`simulator`] — perturb each optimized form and confirm it settles
//!    back (bistability validation).
//! 4. [`fabrication_export`] — z-layer assignment and SVG/JSON export.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod cli;
pub mod error;
pub mod fabrication_export;
pub mod geometry;
pub mod rigidbody;
pub mod rotation;
pub mod scene;
pub mod scenes;
pub mod simulator;
pub mod solver;
pub mod spring_energy;
pub mod spring_placement;
pub mod stability_opt;

pub use error::{Error, Result};
