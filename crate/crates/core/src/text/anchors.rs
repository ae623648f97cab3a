// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering anchor positions and second-line spans.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::text::vocab::Vocabulary;

/// Which prompt position a steering vector is read from and applied to.
///
/// The declaration order is the sweep tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    /// Final token of the last word before the last newline.
    LastWord,
    /// The last newline token.
    Newline,
    /// The last `?` token before the last newline.
    QuestionMark,
}

impl AnchorKind {
    pub const ALL: [AnchorKind; 3] = [Self::LastWord, Self::Newline, Self::QuestionMark];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LastWord => "last_word",
            Self::Newline => "newline",
            Self::QuestionMark => "question_mark",
        }
    }
}

impl fmt::Display for AnchorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnchorKind {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_word" => Ok(Self::LastWord),
            "newline" => Ok(Self::Newline),
            "question_mark" => Ok(Self::QuestionMark),
            other => Err(PlanError::Anchor(format!(
                "unknown anchor `{other}` (expected last_word, newline or question_mark)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionAnchors {
    pub last_newline: usize,
    pub last_word_final_token: usize,
    pub question_mark: Option<usize>,
}

impl PositionAnchors {
    pub fn resolve(&self, kind: AnchorKind) -> Result<usize> {
        match kind {
            AnchorKind::LastWord => Ok(self.last_word_final_token),
            AnchorKind::Newline => Ok(self.last_newline),
            AnchorKind::QuestionMark => self
                .question_mark
                .ok_or_else(|| PlanError::Anchor("prompt has no question mark token".into())),
        }
    }
}

pub fn locate_anchors(vocab: &Vocabulary, tokens: &[u32]) -> Result<PositionAnchors> {
    let last_newline = tokens
        .iter()
        .rposition(|&t| vocab.is_newline(t))
        .ok_or_else(|| PlanError::Anchor("prompt contains no newline token".into()))?;
    let mut last_word = None;
    for (i, &t) in tokens[..last_newline].iter().enumerate().rev() {
        let text = vocab.token_text(t).ok_or(PlanError::UnknownToken {
            id: t,
            vocab: vocab.len(),
        })?;
        if text.chars().any(char::is_alphabetic) {
            last_word = Some(i);
            break;
        }
    }
    let last_word_final_token =
        last_word.ok_or_else(|| PlanError::Anchor("no alphabetic token before the last newline".into()))?;
    let question_mark = tokens[..last_newline]
        .iter()
        .rposition(|t| vocab.question_ids().contains(t));
    Ok(PositionAnchors {
        last_newline,
        last_word_final_token,
        question_mark,
    })
}

/// Generated second line of a couplet, `start..end` in sequence positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecondLineSpan {
    pub start: usize,
    pub end: usize,
}

impl SecondLineSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Span from `prompt_len` to the first generated newline (exclusive), or to
/// the end of the sequence when no newline was generated.
pub fn second_line_span(vocab: &Vocabulary, couplet_tokens: &[u32], prompt_len: usize) -> Result<SecondLineSpan> {
    let generated = couplet_tokens
        .get(prompt_len..)
        .filter(|g| !g.is_empty())
        .ok_or_else(|| PlanError::Anchor("empty generation".into()))?;
    let end = generated
        .iter()
        .position(|&t| vocab.is_newline(t))
        .unwrap_or(generated.len());
    if end == 0 {
        return Err(PlanError::Anchor("empty second line".into()));
    }
    Ok(SecondLineSpan {
        start: prompt_len,
        end: prompt_len + end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::byte_level_with_words(&[
            " it", " grab", " sky", " tight", " sing", " true", " joy", " will", " where",
        ])
        .unwrap()
    }

    #[test]
    fn rhyme_prompt_anchors() {
        let v = vocab();
        let t = v.encode("A rhyming couplet:\nHe saw a carrot and had to grab it\n");
        let a = locate_anchors(&v, &t).unwrap();
        assert_eq!(a.last_newline, t.len() - 1);
        assert_eq!(v.token_text(t[a.last_word_final_token]).unwrap(), " it");
        assert_eq!(a.question_mark, None);
        assert!(a.resolve(AnchorKind::QuestionMark).is_err());
    }

    #[test]
    fn punctuation_is_skipped() {
        let v = vocab();
        let t = v.encode("A rhyming couplet:\nThe knot was tight.\n");
        let a = locate_anchors(&v, &t).unwrap();
        assert_eq!(a.last_word_final_token, a.last_newline - 2);
        assert_eq!(v.token_text(t[a.last_word_final_token]).unwrap(), " tight");
    }

    #[test]
    fn question_prompt_anchors() {
        let v = vocab();
        let t = v.encode("Question: What flying vehicle carries passengers in the sky?\nAnswer:");
        let a = locate_anchors(&v, &t).unwrap();
        assert_eq!(v.token_text(t[a.question_mark.unwrap()]).unwrap(), "?");
        assert_eq!(a.last_newline, a.question_mark.unwrap() + 1);
        assert_eq!(v.token_text(t[a.last_word_final_token]).unwrap(), " sky");
    }

    #[test]
    fn missing_newline_or_word() {
        let v = vocab();
        assert!(locate_anchors(&v, &v.encode("no newline")).is_err());
        assert!(locate_anchors(&v, &v.encode("...\n")).is_err());
    }

    #[test]
    fn second_line_spans() {
        let v = vocab();
        let prompt = v.encode("A rhyming couplet:\nWhispers of freedom found in a bird's wing\n");
        let gen = v.encode("Soaring above where true joy will sing\n");
        let all: Vec<u32> = prompt.iter().chain(&gen).copied().collect();
        let span = second_line_span(&v, &all, prompt.len()).unwrap();
        assert_eq!(span.len(), gen.len() - 1);
        assert_eq!(
            v.decode(&all[span.start..span.end]).unwrap(),
            "Soaring above where true joy will sing"
        );

        let nl: Vec<u32> = prompt.iter().chain(&v.encode("\n")).copied().collect();
        assert!(second_line_span(&v, &nl, prompt.len()).is_err());
        assert!(second_line_span(&v, &prompt, prompt.len()).is_err());

        let open: Vec<u32> = prompt.iter().chain(&v.encode(" joy")).copied().collect();
        assert_eq!(second_line_span(&v, &open, prompt.len()).unwrap().len(), 1);
    }
}
