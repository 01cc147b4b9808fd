use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("state error: {0}")]
    State(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("fp16 conversion: {0}")]
    Fp16(String),

    #[error("bad magic: expected MEG4, found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u16),

    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("corrupt archive: {0}")]
    Corrupt(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
