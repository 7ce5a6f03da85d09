use thiserror::Error;

/// Failure of a subcommand, grouped by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl From<thermdiff::Error> for CliError {
    fn from(e: thermdiff::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Attaches a path to an I/O or library error.
pub trait Context<T> {
    fn at(self, path: &std::path::Path) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn at(self, path: &std::path::Path) -> Result<T, CliError> {
        self.map_err(|e| match e.into() {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
            CliError::Numerical(m) => CliError::Numerical(format!("{}: {m}", path.display())),
        })
    }
}
