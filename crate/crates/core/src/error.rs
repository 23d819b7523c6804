//! Error types shared across the crate.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad split arithmetic, unknown method names,
    /// out-of-range hyperparameters, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data (labels out of range, empty training sets, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Stage index outside `1..=B`.
    #[error("index error: {0}")]
    Index(String),

    /// Tensor shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A requested class has no examples to average.
    #[error("missing class: no examples for class {class}")]
    MissingClass { class: usize },

    /// A zero-norm vector reached the cosine classifier.
    #[error("degenerate vector: {0}")]
    Degenerate(String),

    /// The incremental protocol was violated (prediction outside the seen
    /// label space, non-contiguous stage records, repeated train-set access).
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A binary artifact failed validation (bad magic, truncation, ...).
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
