//! Toy rectified-flow multimodal diffusion transformer with learned, gated,
//! bounded per-token text-modulation coefficients, trained on a synthetic
//! token-conditioned task with a combined flow-matching + preference +
//! sparsity objective, plus trace analytics over the learned coefficients.

pub mod aid;
pub mod analytics;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
mod hash;
pub mod lora;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod toydata;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
