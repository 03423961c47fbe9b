use std::fmt;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, settings or columns.
    Usage(String),
    /// Input that cannot be analysed.
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<ipweval::Error> for CliError {
    fn from(e: ipweval::Error) -> Self {
        use ipweval::Error as E;
        match e {
            E::InvalidConfig(_) | E::CalibrationFailure(_) => CliError::Usage(e.to_string()),
            E::InvalidInput(_) | E::DegenerateData(_) | E::Csv(_) | E::Json(_) | E::Io(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
