use std::fmt;
use std::path::PathBuf;

/// Failures surfaced to the command line, each mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    MissingArtifact(PathBuf),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::MissingArtifact(p) => write!(f, "missing artifact: {}", p.display()),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<rotorflow::Error> for CliError {
    fn from(e: rotorflow::Error) -> Self {
        use rotorflow::Error as E;
        match e {
            E::InvalidArgument(_) | E::DimensionMismatch(_) | E::NonDiagonalWeight(_) | E::WindowOutOfRange { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
