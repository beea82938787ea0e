use std::path::PathBuf;

/// Errors raised by the adaptation toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The composed domain direction (or a single reference shift) has a norm
    /// too small to steer anything; usually a reference that equals the
    /// source anchor.
    #[error("degenerate domain direction: {0}")]
    DegenerateDomain(String),

    /// Malformed bytes in one of the binary artifact formats.
    #[error("{format} format error: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("unsupported {format} version {found}; this build reads version {supported}")]
    UnsupportedVersion {
        format: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("unknown encoder '{0}'")]
    UnknownEncoder(String),

    #[error("encoder '{name}' needs external weights; only the toy encoders run without weight files")]
    EncoderWeightsRequired { name: String },

    #[error("unknown generator architecture '{0}'")]
    UnknownArchitecture(String),

    #[error("generator handle is frozen and rejects parameter updates")]
    FrozenHandle,

    #[error("configuration: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    TrainingDiverged { iteration: usize, reason: String },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
