//! Coevolutionary continuous–discrete diffusion for text at desk scale.
//!
//! A token sequence is corrupted jointly by a masking CTMC (discrete tokens) and a
//! variance-preserving Gaussian process (continuous embeddings of the same tokens).
//! One two-headed transformer denoises both; sampling alternates Bayes-posterior
//! token updates with DDIM/DDPM latent updates.

pub mod autograd;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod data;
pub mod denoiser;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod schedules;
pub mod session;
pub mod theoria;
pub mod training;

pub use batch::{LatentBatch, TokenBatch};
pub use error::{Error, Result};
