//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's preconditions.
    #[error("dimension error: {0}")]
    Dim(String),
    /// An API contract was violated (wrong call order, bad argument domain).
    #[error("contract error: {0}")]
    Contract(String),
    /// A forward operation produced NaN or Inf.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    /// A zero-norm vector reached a cosine / normalization kernel.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    /// The directional loss received a zero delta (identity edit).
    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),
    /// The requested edit cannot be applied to the given scene.
    #[error("infeasible edit: {0}")]
    InfeasibleEdit(String),
    /// An instruction's target phrase is absent from the caption/scene.
    #[error("unresolved target: {0}")]
    UnresolvedTarget(String),
    /// A word outside the closed vocabulary.
    #[error("vocabulary error: unknown word `{0}`")]
    Vocab(String),
    /// Instruction text does not match any grammar production.
    #[error("grammar error: {0}")]
    Grammar(String),
    /// Invalid sigma in the DDIM step.
    #[error("invalid sigma: {0}")]
    InvalidSigma(String),
    /// A pipeline stage ran before its prerequisite checkpoint existed.
    #[error("dependency error: {0}")]
    Dependency(String),
    /// Malformed on-disk data (corpus, checkpoint, image file, config).
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
