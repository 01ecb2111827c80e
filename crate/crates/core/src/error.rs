use std::path::PathBuf;

/// Crate-wide error type.
///
/// Programming errors (shape mismatches, invalid op geometry) panic instead;
/// these variants cover conditions a caller can hit with valid code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("model error: {0}")]
    Model(String),

    #[error("behind-camera point: Z = {0}")]
    BehindCamera(f64),

    #[error("zoom crop window out of bounds; augmentation skipped")]
    AugmentationSkipped,

    #[error("no valid pixels in evaluation")]
    EmptyEvaluation,

    #[error("no unmasked pixels in loss")]
    DegenerateBatch,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
