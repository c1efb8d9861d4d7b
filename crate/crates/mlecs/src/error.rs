use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to name the
/// offending shape, key, or sample in diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is singular even after regularization (pivot {pivot:e})")]
    Singular { pivot: f64 },
    #[error("matrix is not symmetric within {tol:e}")]
    NotSymmetric { tol: f64 },
    #[error("empty input: {what}")]
    Empty { what: &'static str },
    #[error("non-finite value at index {index} in {what}")]
    NonFinite { what: &'static str, index: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("vector of length {got} where {expected} was expected")]
    BadVectorLength { expected: usize, got: usize },
    #[error("invalid argument: {detail}")]
    InvalidArgument { detail: String },
    #[error("negative count {count} exceeds batch size {batch}")]
    NegativesExceedBatch { count: usize, batch: usize },
    #[error("unknown modality `{name}`")]
    UnknownModality { name: String },
    #[error("label {label} out of range for vocabulary of {vocab}")]
    LabelOutOfRange { label: usize, vocab: usize },
    #[error("lora rank {rank} too large for a {p}x{q} layer (need rank <= min(p,q)/2)")]
    RankTooLarge { rank: usize, p: usize, q: usize },
    #[error("missing anchor for sample {id}")]
    MissingAnchor { id: u64 },
    #[error("adapter topology mismatch at layer {layer}: {detail}")]
    TopologyMismatch { layer: usize, detail: String },
    #[error("pooling bins {bins} exceed vocabulary size {vocab}")]
    BinsExceedVocab { bins: usize, vocab: usize },
    #[error("dataset too small: {got} samples, need at least {required}")]
    DatasetTooSmall { got: usize, required: usize },
    #[error("invalid config: {detail}")]
    InvalidConfig { detail: String },
    #[error("config file {path}: {detail}")]
    ConfigParse { path: String, detail: String },
    #[error("override `{key}`: {detail}")]
    BadOverride { key: String, detail: String },
    #[error("objective returned a non-finite value at coordinate {index}")]
    NonFiniteObjective { index: usize },
    #[error("checkpoint: {detail}")]
    Checkpoint { detail: String },
    #[error("gradient tolerance exceeded: {detail}")]
    GradientTolerance { detail: String },
    #[error("self-test failed: {detail}")]
    SelfTest { detail: String },
    #[error("round {round}, step {step}: {source}")]
    RoundStep {
        round: usize,
        step: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach round/step context while an error bubbles out of the protocol loop.
    pub fn in_round(self, round: usize, step: &'static str) -> Error {
        Error::RoundStep {
            round,
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
