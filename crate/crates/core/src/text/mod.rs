// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE tokenization and the structural parsing experiments need.

mod anchors;
mod bytes;
mod pretokenize;
mod vocab;
mod words;

pub use anchors::{locate_anchors, second_line_span, AnchorKind, PositionAnchors, SecondLineSpan};
pub use pretokenize::pretokenize;
pub use vocab::Vocabulary;
pub use words::{first_word, last_word, normalize_word, strip_last_word};
