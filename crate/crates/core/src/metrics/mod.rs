// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rhyme, regeneration, probability, QA, correlation and token metrics.

mod correlation;
mod probability;
mod qa;
mod rhyme;
mod tokens;

pub use correlation::{correlation_report, pearson, CorrelationMatrix, Grouping, MetricReport, MIN_OBSERVATIONS};
pub use probability::{
    fraction_high_kl, fraction_top1_difference, kl_divergence, tokens_after_first, trace_pair, Criterion,
    DistributionTracePair, PositionDivergence, HIGH_KL_THRESHOLD,
};
pub use qa::{marker_fraction, qa_fractions, qa_fractions_expected, QaFractions};
pub use rhyme::{
    build_regeneration_prompt, fraction_correct_rhyme_family, fraction_correct_steered, regeneration_chance_baseline,
    regeneration_rate, RegenerationOptions, RegenerationOutcome,
};
pub use tokens::{token_stats, CategoryTokenStats, CosineReport, SingleTokenFraction, TokenStats};
