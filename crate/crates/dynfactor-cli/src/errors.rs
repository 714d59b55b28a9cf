//! Two-class error model matching the process exit codes: usage errors (bad
//! flags, config, or input data — exit 1) and run errors (estimation or
//! output failures — exit 2).

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(_) => 2,
        }
    }
}

/// Library errors that indicate a request inconsistent with the data are the
/// user's to fix; everything else is a failure of the run itself.
pub fn from_lib(e: dynfactor::Error) -> CliError {
    use dynfactor::Error::*;
    match e {
        InvalidArgument(_) | TooManyFactors { .. } | MissingValues { .. } | BadLevel { .. }
        | EmptySeries { .. } => CliError::Usage(e.to_string()),
        _ => CliError::Run(e.to_string()),
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
