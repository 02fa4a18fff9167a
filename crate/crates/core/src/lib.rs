//! Two-scale disentangled speech representations with a factorized
//! hierarchical variational auto-encoder, adversarial domain-invariance
//! training for the segment-level (content) latent, and an evaluation harness
//! for domain probes and multi-label intent recognition.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod extract;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
