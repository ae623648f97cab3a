// SPDX-License-Identifier: MIT OR Apache-2.0

//! Datasets, lexicons, prompt templates and generation records.

mod bundled;
mod dataset;
mod records;

pub use bundled::{bundled, BUNDLED_NAMES};
pub use dataset::{
    build_prompt, classify_last_word, validate_category, Article, CategoryKind, CategoryPair, Dataset, LexiconIndex,
    PromptCategory, PromptTemplate, Severity, Violation, BALANCE_LIMIT, QA_POSTAMBLE, QA_PREAMBLE, RHYME_PREAMBLE,
};
pub use records::{answer_checks, first_line, words, AnswerCheck, CoupletCollection, GenerationRecord};
