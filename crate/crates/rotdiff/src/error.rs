use std::path::{Path, PathBuf};

use rotdiff_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Process exit status: 2 invalid input, 3 IO or file format, 4 numerical blowup.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 2,
            Self::Io { .. } | Self::Format { .. } => 3,
            Self::Core(CoreError::InvalidArgument(_)) => 2,
            Self::Core(CoreError::Blowup { .. } | CoreError::NumericalDomain { .. }) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Invalid("x".into()).exit_code(), 2);
        assert_eq!(CliError::format(Path::new("a"), "bad").exit_code(), 3);
        let io = CliError::io(Path::new("a"), std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(io.exit_code(), 3);
        assert!(io.to_string().starts_with("a: "));
        let blowup = CliError::from(CoreError::Blowup { step: 3, max_update: 1e12 });
        assert_eq!(blowup.exit_code(), 4);
    }
}
