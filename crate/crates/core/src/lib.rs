//! Library behind the `zdc` tool: offline rotation of attention projections,
//! column-truncated QKV generation with zero refill for unimportant tokens,
//! an adaptive drop-ratio planner, and a deterministic in-process
//! sequence-parallel simulator with byte-exact communication accounting.
//!
//! Everything is seeded and single-precision free: all numerics run in f64
//! with fixed summation orders, so identical inputs produce identical
//! artifacts on every platform.

pub mod corpus;
pub mod engine;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod plan;
pub mod planner;
pub mod rng;
pub mod spsim;
pub mod svd;
pub mod tensor;

pub use engine::{forward, generate, ForwardRequest, Mode, ModelRef, RunStats};
pub use error::Error;
pub use model::{FoldedModel, ModelDims, ToyModel};
pub use pipeline::{fold_parameters, RotationSet};
pub use plan::{CompressionPlan, ConstraintDirection};
pub use planner::{
    enumerate_oracle, enumerate_plans, fit_regressor, GridSpec, OracleOutcome, PlanSample,
    Regressor,
};
pub use spsim::{comm_bytes_model, sp_forward, sp_generate, CommLedger, SpConfig};
pub use svd::{svd, SvdResult};
pub use tensor::{kept_width, softmax_rows, Matrix};

/// Shorthand result type used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
