//! Crate-wide error type. Library code returns `Result<T>`; the CLI binary
//! wraps these in `anyhow` for reporting.

/// Errors surfaced by the library.
///
/// `Shape` and `NonFinite` come out of the autodiff graph, `Contract` out of
/// functions whose preconditions were violated by the caller, `Format` out of
/// the binary file readers (with the byte offset of the first bad field), and
/// `Config` out of config parsing/validation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for `Error::Contract` with a formatted message.
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
