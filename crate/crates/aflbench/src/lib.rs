//! Test bench for buffered asynchronous federated learning.
//!
//! Provides the staleness-based fair aggregation mechanism and its
//! buffered-FedAvg baseline, a deterministic virtual-time simulation of
//! server and clients, synthetic non-IID classification data, and the
//! ergodic convergence-bound calculator used to sanity-check runs.

pub mod aggregation;
pub mod analysis;
pub mod config;
pub mod engine;
pub mod mechanism;
pub mod model;
pub mod seeding;
pub mod verify;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
