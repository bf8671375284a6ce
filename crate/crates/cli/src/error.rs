use std::fmt;

use sensi_core::SensiError;

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum CliError {
    /// A requested check did not pass.
    Check(String),
    Input(String),
    Solver(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Input(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Check(m) | CliError::Input(m) | CliError::Solver(m) => f.write_str(m),
        }
    }
}

impl From<SensiError> for CliError {
    fn from(e: SensiError) -> Self {
        if e.is_solver_failure() {
            CliError::Solver(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}
