use std::fmt;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Input(String),
    Divergence(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Divergence(_) => 4,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Divergence(m) => write!(f, "numerical divergence: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<bilagrid::Error> for CliError {
    fn from(e: bilagrid::Error) -> Self {
        use bilagrid::Error as E;
        match e {
            E::Divergence { .. } | E::NonFiniteGradient { .. } => CliError::Divergence(e.to_string()),
            E::Io(_) | E::Json(_) | E::Csv(_) | E::Image(_) | E::Format(_) | E::ShapeMismatch(_) | E::IndexOutOfRange { .. } => {
                CliError::Input(e.to_string())
            }
            E::InvalidArgument(_) | E::InvalidDimensions(_) => CliError::Config(e.to_string()),
            E::Decomposition(_) => CliError::Other(e.to_string()),
        }
    }
}

/// Wraps output-side I/O failures, which are not input errors.
pub fn output<T>(r: Result<T, impl fmt::Display>, what: &std::path::Path) -> Result<T, CliError> {
    r.map_err(|e| CliError::Other(format!("writing {}: {e}", what.display())))
}
