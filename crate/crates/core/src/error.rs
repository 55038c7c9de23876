use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: left operand is {lr}x{lc}, right operand is {rr}x{rc}")]
    DimMismatch { lr: usize, lc: usize, rr: usize, rc: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("empty matrix not allowed here: {context}")]
    EmptyMatrix { context: String },

    #[error("svd did not converge after {sweeps} sweeps, off-diagonal residual {residual:.3e}")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("drop ratio {value} outside [0, 1)")]
    BadDropRatio { value: f64 },

    #[error("importance fraction {value} outside (0, 1]")]
    BadFraction { value: f64 },

    #[error("rotation for layer {layer} head {head} is not orthogonal, residual {residual:.3e}")]
    NotOrthogonal { layer: usize, head: usize, residual: f64 },

    #[error("activation bank has too few rows: {rows} < head_dim {head_dim}")]
    TooFewRows { rows: usize, head_dim: usize },

    #[error("corpus is empty: {context}")]
    EmptyCorpus { context: String },

    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("invalid plan: {reason}")]
    BadPlan { reason: String },

    #[error("invalid model: {reason}")]
    BadModel { reason: String },

    #[error("regressor needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("regressor samples are degenerate: {reason}")]
    DegenerateSamples { reason: String },

    #[error("sequence of {seq_len} tokens cannot be split across {workers} workers")]
    TooFewTokens { seq_len: usize, workers: usize },

    #[error("{heads} heads cannot be split evenly across {workers} workers")]
    UnevenHeads { heads: usize, workers: usize },

    #[error("degradation undefined: every reference element is below the exclusion threshold")]
    AllExcluded,

    #[error("bad artifact {path}: {reason}")]
    BadArtifact { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    pub fn json(path: &std::path::Path, source: serde_json::Error) -> Self {
        Error::Json { path: path.display().to_string(), source }
    }
}
