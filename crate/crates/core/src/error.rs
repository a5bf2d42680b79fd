use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants are coarse on purpose: the CLI maps each one to a distinct
/// exit code, so adding a variant means adding an exit code as well.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid fusion plan: {0}")]
    Plan(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed data at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
