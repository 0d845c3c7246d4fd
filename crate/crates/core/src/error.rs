use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("value {value} at index {index} is not +1 or -1")]
    NotBinary { index: usize, value: f32 },

    #[error("tail padding bits of row {row} do not match the fill bit")]
    PaddingAudit { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("non-finite gradient in layer {layer} ({param})")]
    NonFiniteGradient { layer: usize, param: &'static str },

    #[error("bad magic {0:?}, expected \"BMX1\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated model file: {0}")]
    Truncated(String),

    #[error("model file does not match its architecture: {0}")]
    ArchMismatch(String),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("allocation of {bytes} bytes exceeds the {limit} byte memory guard")]
    MemoryGuard { bytes: u64, limit: u64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn layer(layer: usize, msg: impl Into<String>) -> Self {
        Error::Layer {
            layer,
            message: msg.into(),
        }
    }
}
