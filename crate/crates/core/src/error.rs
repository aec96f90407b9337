use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// invalid parameters/models are usage errors, `Io`/`Dataset`/`Format` are
/// I/O errors, and `Diverged`/`NonFinite` are numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("shape mismatch at {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss {value})")]
    Diverged {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("bad model file: {0}")]
    Format(String),

    #[error("bad dataset file {path}: {detail}")]
    Dataset { path: String, detail: String },
}
