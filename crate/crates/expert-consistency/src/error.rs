//! Error type shared by every module, with the CLI exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments or configuration supplied by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violates a contract (schema, binary labels, censoring, split feasibility).
    #[error("data error: {0}")]
    Data(String),

    /// A numerical routine failed (non-convergence, singular system, ill conditioning).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A pipeline stage failed; carries the stage name.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric. IO problems count as data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_cli_contract() {
        assert_eq!(Error::usage("x").exit_code(), 1);
        assert_eq!(Error::data("x").exit_code(), 2);
        assert_eq!(Error::numeric("x").exit_code(), 3);
        assert_eq!(Error::numeric("x").at_stage("fit").exit_code(), 3);
    }
}
