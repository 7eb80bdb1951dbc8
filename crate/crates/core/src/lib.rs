//! Learned unstructured pruning masks for small causal language models.
//!
//! Each prunable weight matrix `W` gets a parallel logit matrix `P`. Training
//! samples a relaxed Bernoulli mask `M = σ((αP + g)/τ)` with Gumbel noise `g`,
//! applies it as `M ⊙ W`, and optimizes `P` alone against a language-modeling
//! loss plus a global density penalty and a magnitude reward. Weights never
//! change. After training, a global top-k over `P` yields a binary mask at an
//! exact density.

pub mod analysis;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod mask;
pub mod model;
pub mod objective;
pub mod sparse;
pub mod trainer;

pub use error::{Error, Result};
