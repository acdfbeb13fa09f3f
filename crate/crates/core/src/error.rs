use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("degenerate sample: all {0} observations are equal")]
    SinglePoint(usize),

    #[error("invalid initial values: {0}")]
    InvalidInit(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("fits were computed on different datasets")]
    DatasetMismatch,

    #[error("autocorrelation undefined for a series with zero variance")]
    UndefinedAcf,

    #[error("invalid lag configuration: {0}")]
    InvalidLag(String),

    #[error("invalid degrees of freedom: {lags} lags with {adjust} dof adjustment")]
    InvalidDof { lags: usize, adjust: usize },

    #[error("invalid coverage {value} for stratum {stratum}")]
    InvalidCoverage { stratum: String, value: f64 },

    #[error("line {line}, column `{column}`: {message}")]
    Record {
        line: u64,
        column: String,
        message: String,
    },

    #[error("duplicate record for stratum {stratum} at month {month}")]
    DuplicateKey { stratum: String, month: u32 },

    #[error("stratum {stratum} is missing month {month}")]
    MissingMonth { stratum: String, month: u32 },

    #[error("population table has no entry for stratum {stratum} at month {month}")]
    MissingPopulation { stratum: String, month: u32 },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by malformed or out-of-contract user input, as opposed to
    /// failures of the model or the optimizer.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::EmptyInput(_)
                | Error::InvalidSeries(_)
                | Error::InvalidLag(_)
                | Error::InvalidDof { .. }
                | Error::InvalidCoverage { .. }
                | Error::Record { .. }
                | Error::DuplicateKey { .. }
                | Error::MissingMonth { .. }
                | Error::MissingPopulation { .. }
                | Error::Csv(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
