//! Desk-scale privacy laboratory for federated transfer learning.
//!
//! The crate covers both sides of a gradient-based data reconstruction
//! attack on a federated classification head:
//!
//! * attacker: robust pretraining of the feature extractor, sparse-activation
//!   head training, analytic IR extraction from the head's weight/bias
//!   gradients, and IR-matching inversion through a generator prior;
//! * defender: normalized-entropy scanning for handcrafted parameter
//!   patterns, structural checksums, and local differential privacy on the
//!   uploaded update.

pub mod config;
pub mod data;
pub mod detection;
pub mod error;
pub mod federation;
pub mod leakage;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod reconstruction;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
