use std::fmt;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error in entry `{entry}`: {msg}")]
    Format { entry: String, msg: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("invalid parameter `{field}`: {msg}")]
    Param { field: String, msg: String },
    #[error("line {line}: {source}")]
    Line { line: usize, source: Box<Error> },
    #[error("{stage} stage failed: {source}")]
    Stage { stage: String, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl fmt::Display) -> Self {
        Error::Shape(msg.to_string())
    }

    pub(crate) fn format(entry: impl Into<String>, msg: impl fmt::Display) -> Self {
        Error::Format { entry: entry.into(), msg: msg.to_string() }
    }

    pub fn at_stage(stage: &str) -> impl FnOnce(Error) -> Error + '_ {
        move |e| Error::Stage { stage: stage.to_string(), source: Box::new(e) }
    }

    /// Field named by a parameter error, looking through line tags.
    pub fn param_field(&self) -> Option<&str> {
        match self {
            Error::Param { field, .. } => Some(field),
            Error::Line { source, .. } => source.param_field(),
            _ => None,
        }
    }

    pub(crate) fn param(field: impl Into<String>, msg: impl fmt::Display) -> Self {
        Error::Param { field: field.into(), msg: msg.to_string() }
    }
}
