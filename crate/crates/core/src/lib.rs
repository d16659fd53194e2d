//! Semi-supervised incremental few-shot learning at desk scale.
//!
//! The crate covers episodic sampling over base and novel class splits, a
//! cosine-classifier model with prototype imprinting, soft prototype
//! refinement with unlabeled data, episodic meta-training with and without
//! fake unlabeled sets, test-time adaptation with contrastive and
//! distillation losses, comparison baselines, and the evaluation protocol.

pub mod adaptation;
pub mod baselines;
pub mod dataset_io;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod refinement;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tape;
pub mod training;
pub mod types;

pub use error::{Error, Result};
