use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode wav {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}: expected a mono file, found {channels} channels")]
    NotMono { path: PathBuf, channels: u16 },

    #[error("{path}: sample rate {found} Hz differs from {expected} Hz of the first layer")]
    SampleRateMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: unsupported sample format ({detail})")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("layer `{layer}` is empty or silent and cannot be normalized")]
    SilentLayer { layer: String },

    #[error("layer of {len} samples is shorter than the fft size {fft_size}")]
    TooShort { len: usize, fft_size: usize },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("reference magnitude has zero norm")]
    ZeroReference,

    #[error("training diverged at stage {stage}, iteration {iteration}: {what} is not finite")]
    Divergence {
        stage: usize,
        iteration: usize,
        what: &'static str,
    },

    #[error("checkpoint {path}: missing blob `{blob}`")]
    MissingBlob { path: PathBuf, blob: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::NotMono { .. }
                | Error::SampleRateMismatch { .. }
                | Error::UnsupportedFormat { .. }
                | Error::SilentLayer { .. }
                | Error::TooShort { .. }
        )
    }
}
