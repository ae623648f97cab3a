// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every planlab module.

use thiserror::Error;

/// Errors produced by the runtime, tokenizer, experiment and metric code.
#[derive(Debug, Error)]
pub enum PlanError {
    /// Input sequence is longer than the model's context window.
    #[error("sequence of {len} tokens exceeds max context {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// Token id outside the vocabulary.
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    UnknownToken { id: u32, vocab: usize },

    /// An intervention points at a layer, head or position that does not exist.
    #[error("intervention out of range: {0}")]
    InterventionRange(String),

    /// Malformed intervention plan.
    #[error("invalid intervention plan: {0}")]
    InvalidPlan(String),

    /// Model spec failed validation.
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    /// Tensor container could not be read or written.
    #[error("tensor container: {0}")]
    Container(String),

    /// A named tensor is missing or has the wrong shape.
    #[error("tensor `{name}`: {msg}")]
    Tensor { name: String, msg: String },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    /// Anchor positions could not be resolved in a prompt.
    #[error("anchor: {0}")]
    Anchor(String),

    /// Dataset schema or content error; the message carries the JSON path.
    #[error("dataset: {0}")]
    Dataset(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("steering: {0}")]
    Steering(String),

    /// A sweep cell's evaluator failed.
    #[error("sweep cell (layer {layer}, {anchor}): {source}")]
    SweepCell {
        layer: usize,
        anchor: String,
        source: Box<PlanError>,
    },

    #[error("planted model: {0}")]
    Planted(String),

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, PlanError>;
