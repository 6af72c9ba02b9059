use thiserror::Error;

/// Errors raised anywhere in the embedding and prompting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("eval error: {0}")]
    Eval(String),
    #[error("degenerate task: {0}")]
    DegenerateTask(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

/// Attaches the offending path to an I/O error.
pub(crate) fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}
