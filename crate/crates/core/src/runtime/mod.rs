// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic CPU inference for decoder-only transformers.

pub mod container;
mod kernels;
mod model;
mod sampling;
pub mod spec;
mod weights;

pub use container::{Container, Tensor};
pub use model::{
    AttentionTrace, Capture, ForwardOutput, Model, NextTokenDistribution, ResidualCapture, ResidualTrace, Session,
};
pub use sampling::{derive_seed, sample_completion, RolloutConfig};
pub use spec::{Activation, ModelSpec, NormScheme, PositionalScheme};
pub use weights::WeightStore;
