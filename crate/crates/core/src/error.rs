use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward already ran on this graph; record a new forward pass first")]
    BackwardTwice,

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("CTC infeasible: {frames} frames cannot emit {labels} labels with {repeats} adjacent repeats")]
    Infeasible {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("label symbol {symbol} outside [1, {max}]")]
    InvalidLabel { symbol: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid config file: {0}")]
    ConfigParse(String),

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Prefixes the field of a config error with its section.
    pub(crate) fn in_section(self, section: &str) -> Self {
        match self {
            Error::Config { field, message } => Error::Config {
                field: format!("{section}.{field}"),
                message,
            },
            other => other,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }
}
