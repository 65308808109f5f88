use std::io;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: {detail}")]
    Shape { axis: &'static str, detail: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },
    #[error("sequence {name}: {source}")]
    Sequence {
        name: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            axis,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_) => 2,
            Error::Config(_) => 3,
            Error::Sequence { source, .. } => source.exit_code(),
            _ => 4,
        }
    }
}
