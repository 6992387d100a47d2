//! Model-selection criteria for symbolic regression.
//!
//! The pipeline generates noisy benchmark data, builds a pool of overfitted
//! candidate expressions by mutating the generating expression, scores each
//! candidate under several selection criteria, and measures how well each
//! criterion's ranking tracks test error and recovers the generating
//! expression.

pub mod criteria;
pub mod datagen;
pub mod errin;
pub mod evalharness;
pub mod experiment;
pub mod expr;
pub mod optfit;
pub mod poolgen;
pub mod rng;

pub use criteria::{CriterionId, ScoreRow};
pub use datagen::{Benchmark, Dataset};
pub use experiment::{run, RunConfig, RunReport};
pub use expr::{ExpressionTree, Node, Operator};
pub use optfit::FitResult;
pub use poolgen::FittedCandidate;
