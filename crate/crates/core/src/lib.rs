//! Personalized federated optimization with the model-mixture objective
//!
//! ```text
//! f̃(x) = (1/n) Σ_i f_i(α_i x + (1 − α_i) x_i)
//! ```
//!
//! where `x_i` is client `i`'s pure local model and `α_i ∈ [0, 1]` its
//! personalization weight. The crate provides client losses, data loading,
//! the mixture objective with its constants and communication ladder,
//! unbiased compressors, DGD/DCGD/DIANA solvers, bound checkers and the
//! experiment harness behind the `flix` binary.
//!
//! ```
//! use flix::{AlphaVector, FlixProblem, QuadraticObjective, ClientObjective};
//!
//! let clients: Vec<ClientObjective> = vec![
//!     QuadraticObjective::from_rows(&[vec![1.0]], &[1.0], 0.5)?.into(),
//!     QuadraticObjective::from_rows(&[vec![1.0]], &[-1.0], 0.5)?.into(),
//! ];
//! let p = FlixProblem::from_clients(clients, AlphaVector::uniform(2, 0.5)?, 1e-12, 10)?;
//! assert_eq!(p.value(&[0.0])?, 0.125);
//! # Ok::<(), flix::FlixError>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons reject NaN on purpose

pub mod compression;
pub mod config;
pub mod data_io;
pub mod error;
pub mod flix;
pub mod harness;
pub mod linalg;
pub mod objectives;
pub mod solvers;
pub mod verification;

pub use compression::{client_rng, k_sweep, CompressorKind, CompressorSpec};
pub use error::{FlixError, Result};
pub use flix::{AggregateConstants, AlphaVector, BudgetSchedule, FlixProblem, HeterogeneityConstants};
pub use objectives::{ClientObjective, DataBlock, LogisticObjective, ObjectiveConstants, QuadraticObjective};
pub use solvers::{run_dcgd, run_dgd, run_diana, Algorithm, Init, RunOptions, StepsizeMode, Trajectory};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/budget.md")]
    mod budget {}
    #[doc = include_str!("../../../book/src/compression.md")]
    mod compression {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
