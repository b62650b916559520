use smc_core::filters::FilterError;
use smc_core::kalman::KalmanError;
use smc_core::pmmh::PmmhError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<PmmhError> for CliError {
    fn from(e: PmmhError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<KalmanError> for CliError {
    fn from(e: KalmanError) -> Self {
        match e {
            KalmanError::NotPositiveDefinite { .. } => CliError::Numerical(e.to_string()),
            KalmanError::Dimension(_) => CliError::Config(e.to_string()),
        }
    }
}
