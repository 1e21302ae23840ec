use std::fmt;
use std::path::PathBuf;

/// Exit status for user, configuration and data errors.
pub const EXIT_USER: u8 = 2;
/// Exit status for non-finite arithmetic during training or probing.
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration; `key` is the dotted path of the offending entry.
    Config { key: Option<String>, msg: String },
    Core(mole::Error),
    /// A numeric failure whose details were written to `diagnostics`.
    Numeric { source: mole::Error, diagnostics: PathBuf },
}

impl CliError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::Config {
            key: Some(key.into()),
            msg: msg.into(),
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Config {
            key: None,
            msg: msg.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Numeric { .. } => EXIT_NUMERIC,
            _ => EXIT_USER,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { key: Some(k), msg } => write!(f, "config error at `{k}`: {msg}"),
            CliError::Config { key: None, msg } => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Numeric { source, diagnostics } => {
                write!(f, "{source} (diagnostics: {})", diagnostics.display())
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<mole::Error> for CliError {
    fn from(e: mole::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>, e: std::io::Error) -> CliError {
    let path = path.into();
    CliError::usage(format!("I/O error on {}: {e}", path.display()))
}
