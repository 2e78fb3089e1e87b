//! Deterministic desk-scale simulator for split federated training with
//! auxiliary-network local loss, periodic smashed-data uploads, and exact
//! communication/storage accounting, plus evaluation of the matching
//! convergence bounds.

pub mod algo;
pub mod bounds;
pub mod config;
pub mod data;
pub mod error;
pub mod ledger;
pub mod nn;
pub mod sched;
pub mod split;
pub mod tensor;

pub use error::{Error, Result};
pub use ledger::Method;
pub use tensor::Tensor;
