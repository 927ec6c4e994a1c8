use std::io;

/// Errors raised across the synthesis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("sentence {sentence} has {tokens} tokens but its span only covers {width} frames")]
    SpanOverflow {
        sentence: usize,
        tokens: usize,
        width: usize,
    },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("word error rate is undefined for an empty reference")]
    UndefinedWer,

    #[error("correlation is undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::SpanOverflow { .. } => "span-overflow",
            Error::Alignment(_) => "alignment",
            Error::Degenerate(_) => "degenerate",
            Error::UndefinedWer => "undefined-wer",
            Error::UndefinedCorrelation(_) => "undefined-correlation",
            Error::Contract(_) => "contract",
            Error::Domain(_) => "domain",
            Error::Version(_) => "version",
            Error::Integrity(_) => "integrity",
            Error::Format(_) | Error::Json(_) => "parse",
            Error::NonFinite(_) => "non-finite",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
