use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] cgf_core::Error),
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    /// Scene generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),
    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    NonFinite { epoch: usize, term: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad image file {path}: {msg}")]
    Image { path: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
