//! Experiment runner for the `gradinv-core` attack engine: configuration,
//! dataset ingestion, end-to-end pipelines and result files.

#![forbid(unsafe_code)]

pub mod config;
pub mod dataset;
pub mod image;
pub mod pipeline;
pub mod report;
pub mod selftest;

use std::time::Instant;

use gradinv_core::clock::Clock;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] gradinv_core::Error),
}

impl Error {
    /// Process exit code: 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Core(gradinv_core::Error::InvalidConfig(_)) => 2,
            _ => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}

/// Wall clock measuring seconds since construction.
#[derive(Clone, Copy, Debug)]
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        StdClock(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
