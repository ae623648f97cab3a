// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering, patching and planning metrics for small decoder-only
//! transformers on CPU.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod circuit;
pub mod corpus;
pub mod error;
pub mod generate;
pub mod intervene;
pub mod metrics;
pub mod planted;
pub mod report;
pub mod runtime;
pub mod steer;
pub mod text;

pub use error::{PlanError, Result};
