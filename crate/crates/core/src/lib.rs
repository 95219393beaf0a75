//! Preference optimization with length-debiased implicit rewards.
//!
//! The crate bundles the reward kernels (full-sum, down-sampled,
//! length-normalized and top-k), a tiny differentiable policy, a synthetic
//! corpus with controllable length bias, and a trainer tying them together.

pub mod datagen;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod trainer;
pub mod types;

pub use datagen::{CorpusSpec, DatagenError, Judge, LengthBias, QualityOracle};
pub use kernels::KernelError;
pub use model::{ModelError, ModelShape, ParamGrad, PolicyParams};
pub use rng::{rng_for, Domain, RngStream};
pub use trainer::{RunMetrics, TrainConfig, TrainError};
pub use types::{
    ImplicitReward, LossConfig, PreferenceTriplet, RefreshCadence, TokenLogRatios, TokenSeq,
    TripletMeta, TypeError, Variant,
};
