//! Robust prediction under additive interventions: learn latent
//! representations with an energy-score autoencoder, then fit a
//! distributionally robust linear model on the centered latents.

pub mod baselines;
pub mod drig;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod repr_train;
pub mod robustness;
pub mod rng;
pub mod scm_gen;
pub mod tensor_nn;

pub use error::{CirrlError, Result};
