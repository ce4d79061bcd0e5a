//! GELD: a neural solver for the Euclidean travelling salesman problem.
//!
//! A single broad encoder layer built on region-average linear attention
//! gives every node a cheap global view of the instance; a stack of
//! distance-aware decoder layers then picks the next node from the
//! k nearest unvisited neighbours of the current one. The crate also
//! ships the classical baselines used to judge it, a two-stage trainer,
//! TSPLIB/synthetic data handling and the `geld` command line tool.

pub mod cli;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod heuristics;
pub mod inference;
pub mod io;
pub mod model;
pub mod numeric;
pub mod training;
pub mod tsp;

pub use error::{GeldError, Result};
pub use model::{ModelConfig, ModelParams};
pub use numeric::{Scalar, Tensor};
pub use tsp::{MetricMode, Tour, TspInstance};
