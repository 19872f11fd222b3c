//! Machine-unlearning laboratory at desk scale.
//!
//! A tiny decoder-only language model is trained on a seeded synthetic fact
//! world, then a forget split is unlearned with perturbation-based
//! distribution matching (PERMU) and a set of baselines. The evaluation suite
//! measures forgetting on the forget split and on implicit variants of the
//! forgotten facts (paraphrases, aliases, reversed relations, one-hop
//! compositions).

pub mod autograd;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod factworld;
pub mod gradcheck;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod sensitivity;
pub mod tensor;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
