// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tiny transformers with a hand-built planning circuit, and an independent
//! reference forward pass to check the runtime against.

mod build;
mod oracle;
mod selftest;
mod spec;
mod worlds;

pub use build::{build_planted_model, delete_head, MIN_MODEL_DIM};
pub use oracle::{brute_force_logits, relative_error};
pub use selftest::{config_hash, self_test, self_test_sections, Check, Section, SelfTestConfig, SelfTestReport};
pub use spec::{GroundTruth, PlantedSide, PlantedSpec, ResolvedTokens};
pub use worlds::{micro_qa_world, micro_rhyme_world, synthetic_world, world, PlantedModel, PlantedWorld, WORLD_NAMES};
