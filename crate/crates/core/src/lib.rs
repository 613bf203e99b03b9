//! Structured gene-environment interaction analysis.
//!
//! Penalized least squares with an MCP sparsity penalty, a quadratic structure
//! penalty `J` (second-difference or normalized graph Laplacian), and the
//! decomposition `eta_kj = beta_j * gamma_kj` that keeps every selected
//! interaction attached to a selected main G effect. Censored outcomes are
//! handled through Kaplan-Meier weighted least squares.

// `!(x > 0.0)` rejects NaN on purpose; dense numeric loops index several
// arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aft;
pub mod baselines;
pub mod benchmark;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod penalties;
pub mod simulation;
pub mod solver;
pub mod tuning;

pub use data::{CoefficientSet, Dataset, FullEffects, SparsityPattern};
pub use error::{GxeError, Result};
pub use penalties::{McpParams, PenaltyKind, PenaltyMatrix};
pub use solver::{FitResult, SolverConfig};
