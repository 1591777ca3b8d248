//! Joint estimation of microphone start times and source emission times from
//! TOA or TDOA measurements via combined low-rank approximation (CLRA).
//!
//! The pipeline: [`scene`] synthesizes geometry and measurements,
//! [`lowrank`] builds the `D`/`U` matrices and their low-rank variants,
//! [`solver`] runs Gauss-Newton on the penalized structured low-rank
//! problem, [`metrics`] scores estimates, and [`experiments`] drives
//! Monte-Carlo studies.
//!
//! ```
//! use clra::scene::{generate_scene, toa_from_scene, SceneSpec};
//! use clra::solver::init_offsets;
//! use clra::{solve, Method, MethodSetup, SolverConfig};
//!
//! let scene = generate_scene(&SceneSpec::simulation(10, 10), 7)?;
//! let meas = toa_from_scene(&scene)?;
//! let setup = MethodSetup::resolve(Method::Clra, 10, 10, None, None)?;
//! let init = init_offsets(10, 10, [-1.0, 1.0], 1)?;
//! let out = solve(&meas, &setup, &init, &SolverConfig::default())?;
//! assert_eq!(out.offsets.eta[0], 0.0);
//! # Ok::<(), clra::Error>(())
//! ```

// `!(x > 0.0)` style checks are how NaN gets rejected alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod lowrank;
pub mod metrics;
pub mod scene;
pub mod solver;

pub use error::{Error, Result};
pub use scene::{MeasurementKind, MeasurementMatrix, Scene, TimingOffsets};
pub use solver::{solve, Method, MethodSetup, SolveOutcome, SolveStatus, SolverConfig};
