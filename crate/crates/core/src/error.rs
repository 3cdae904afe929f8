use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    InvalidId { id: u32, vocab_size: usize },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("span ({start}, {end}) outside document of length {len}")]
    Span { start: usize, end: usize, len: usize },

    #[error("sequence of length {len} exceeds context window {window}{}", turn.map(|t| format!(" (turn {t})")).unwrap_or_default())]
    ContextOverflow {
        len: usize,
        window: usize,
        turn: Option<usize>,
    },

    #[error("document is empty")]
    EmptyDocument,

    #[error("non-finite value in {component}")]
    Numeric { component: String },

    #[error("reward mode {mode} cannot be applied: {reason}")]
    Mode { mode: String, reason: String },

    #[error("support violation: q({index}) = 0 where p({index}) = {p}")]
    Support { index: usize, p: f64 },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn numeric(component: impl Into<String>) -> Self {
        Error::Numeric {
            component: component.into(),
        }
    }

    /// Attach a turn index to a context overflow, leaving other errors as is.
    pub fn at_turn(self, t: usize) -> Self {
        match self {
            Error::ContextOverflow { len, window, .. } => Error::ContextOverflow {
                len,
                window,
                turn: Some(t),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
