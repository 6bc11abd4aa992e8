//! Error taxonomy shared by the library and the CLI.
//!
//! The three non-IO variants map onto the CLI's exit codes: `Config` is a
//! caller mistake (bad flag combination, invalid hyperparameter), `Data` is a
//! problem with the input files (schema, conformability, degenerate columns),
//! and `Numerical` is a runtime failure of the numerics (initialization,
//! non-SPD matrices, diagnostic gates).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or an operation invoked without its prerequisites.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates the documented schema or is degenerate.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: non-finite densities, failed factorizations,
    /// unreliable fits.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}
