use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller broke an operation's precondition (shapes, widths, lengths).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown {kind}: {name}")]
    Lookup { kind: &'static str, name: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("demo generation failed: {0}")]
    Generation(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
