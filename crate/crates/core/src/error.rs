use thiserror::Error;

/// Errors raised anywhere in the stack.
///
/// The variants double as the CLI's error categories, so each carries enough
/// context to identify the failing module and operation.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// A documented precondition was violated by the caller.
    #[error("contract error in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    /// An op produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    /// Bad or missing configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed checkpoint or data file.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn contract_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Contract {
        op,
        detail: detail.into(),
    })
}
