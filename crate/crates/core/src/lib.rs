//! Adversarial learning of a variational distribution between image and text
//! embeddings on the unit hypersphere, with a cone-constrained sampling
//! operator, a synthetic two-modality benchmark world, baseline samplers, a
//! toy conditional second stage, and deterministic, resumable training.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod numerics;
pub mod sampler;
pub mod stage2;
pub mod trainer;

pub use error::{Result, VdlError};
pub use losses::{Divergence, GenLossMode, LossWeights};
pub use metrics::{BaselineTable, MetricsReport};
pub use net::DenseNet;
pub use numerics::{cosine, norm, Rng, UnitVec};
pub use sampler::{prop1_bound, svdl_sample, verify_prop1, SvdlConfig};
pub use trainer::{train_semi, train_stage1, TrainConfig, VdlModel};
