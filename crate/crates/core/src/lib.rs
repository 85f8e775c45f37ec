//! Federated learning of probabilistic masks over frozen random weights.
//!
//! Clients train Bernoulli keep-probabilities for a fixed signed-constant
//! network, upload one sampled binary mask per round, and the server folds the
//! masks back into a global probability mask.

pub mod aggregate;
pub mod codec;
pub mod data;
mod error;
pub mod mask;
pub mod nn;
pub mod par;
pub mod privacy;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
