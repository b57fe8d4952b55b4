//! Simulation of federated client updates and reconstruction of the client's
//! private data from a single observed update.

pub mod attack;
pub mod autodiff;
pub mod defenses;
pub mod error;
pub mod experiment;
pub mod fedavg;
pub mod io;
pub mod label_recon;
pub mod matching;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
