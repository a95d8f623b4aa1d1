//! FedAvg on a two-layer ReLU CNN over synthetic signal-noise data.
//!
//! The crate simulates federated averaging with full-batch local gradient
//! descent and tracks, round by round, how much of every filter's
//! displacement from initialization lies along the shared signal vector
//! versus along each training sample's noise vector. Those coefficients,
//! together with filter alignment at initialization, explain how data
//! heterogeneity and the number of local steps affect generalization.
//!
//! Modules follow the pipeline:
//!
//! * [`data`]: signal-noise dataset generation and client partitioning.
//! * [`model`]: the CNN forward pass, logistic loss and closed-form gradient.
//! * [`fedavg`]: local rounds, averaging, the coefficient ledger and training.
//! * [`analysis`]: alignment, SNR, test error and coefficient summaries.
//! * [`config`] / [`experiment`]: run configuration, single runs and sweeps.

pub mod analysis;
pub mod config;
pub mod csvio;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fedavg;
pub mod model;
pub mod seed;
mod sign;

pub use error::{Error, Result};
pub use sign::Sign;
