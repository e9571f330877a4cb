use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke a documented precondition (dimension, sign, range).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Input data is missing, malformed or fails validation.
    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error: {0}")]
    Numeric(String),

    /// An invariant the scheme guarantees was observed broken.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 1,
            Error::Domain(_) | Error::Data(_) | Error::Io { .. } => 2,
            Error::Numeric(_) | Error::Invariant(_) => 3,
        }
    }

    /// Prefix the message with the module or stage that produced it.
    pub fn context(self, what: &str) -> Self {
        match self {
            Error::Contract(m) => Error::Contract(format!("{what}: {m}")),
            Error::Domain(m) => Error::Domain(format!("{what}: {m}")),
            Error::Config(m) => Error::Config(format!("{what}: {m}")),
            Error::Data(m) => Error::Data(format!("{what}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{what}: {m}")),
            Error::Invariant(m) => Error::Invariant(format!("{what}: {m}")),
            io @ Error::Io { .. } => io,
        }
    }
}
