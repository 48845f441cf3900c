//! Desk-scale laboratory for energy-latency sponge attacks on neural networks.
//!
//! The crate bundles a small tensor engine with reverse-mode differentiation,
//! a zero-skipping accelerator energy model, the bias-escalation attack that
//! raises a trained model's energy ratio without retraining, the training-time
//! sponge poisoning baseline, and parameter-space defenses.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod defense;
pub mod energy;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod poison;
pub mod profiler;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use attack::{run_skipsponge, AttackConfig, AttackOutcome, AttackTrace};
pub use data::Dataset;
pub use energy::{CostConstants, EnergyReport};
pub use model::{ModelGraph, TargetLayerSet};
pub use poison::PoisonConfig;
pub use profiler::ActivationProfile;
pub use tensor::Tensor;
pub use train::{Task, TrainConfig};
