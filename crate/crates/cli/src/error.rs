use std::fmt;
use std::path::Path;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
    Io(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    /// Prefix the message with where it happened.
    pub fn context(self, what: impl fmt::Display) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{what}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{what}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<csshap::Error> for CliError {
    fn from(e: csshap::Error) -> Self {
        use csshap::Error as E;
        match e {
            E::InvalidInput(_) | E::Config(_) | E::Capacity(_) | E::Format(_) | E::Json(_) => {
                CliError::Validation(e.to_string())
            }
            E::Training(_) => CliError::Runtime(e.to_string()),
            E::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub fn validation<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Validation(msg.into()))
}
