// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generated completions and the answer checks applied to them.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::dataset::Article;
use crate::error::{PlanError, Result};

/// One sampled completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// `category/split/index`.
    pub prompt_id: String,
    /// Category the prompt was written for.
    pub category: String,
    /// Category the run was steered toward, if steered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steered_toward: Option<String>,
    pub sample_index: usize,
    pub prompt: String,
    pub prompt_tokens: Vec<u32>,
    pub completion: String,
    pub completion_tokens: Vec<u32>,
}

impl GenerationRecord {
    /// Completion up to its first newline.
    pub fn first_line(&self) -> &str {
        first_line(&self.completion)
    }

    /// Category the record should be scored against.
    pub fn expected_category(&self) -> &str {
        self.steered_toward.as_deref().unwrap_or(&self.category)
    }

    pub fn full_tokens(&self) -> Vec<u32> {
        let mut t = self.prompt_tokens.clone();
        t.extend_from_slice(&self.completion_tokens);
        t
    }
}

pub fn first_line(text: &str) -> &str {
    text.split('\n').next().unwrap_or("")
}

/// Records in generation order, persisted as JSON lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoupletCollection {
    pub records: Vec<GenerationRecord>,
}

impl CoupletCollection {
    pub fn new(records: Vec<GenerationRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| PlanError::Dataset(format!("{} line {}: {e}", path.display(), n + 1)))?,
            );
        }
        Ok(Self { records })
    }

    /// Records grouped by `category`, in first-seen order.
    pub fn by_category(&self) -> Vec<(String, Vec<&GenerationRecord>)> {
        let mut out: Vec<(String, Vec<&GenerationRecord>)> = Vec::new();
        for r in &self.records {
            match out.iter_mut().find(|(c, _)| *c == r.category) {
                Some((_, v)) => v.push(r),
                None => out.push((r.category.clone(), vec![r])),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerCheck {
    pub contains_answer: bool,
    pub article: Option<Article>,
}

/// Lowercased alphabetic words of `text` (apostrophes split words).
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Substring and article checks on the answer's first line.
pub fn answer_checks(answer: &str, noun: &str) -> AnswerCheck {
    let line = first_line(answer);
    let contains_answer = !noun.is_empty() && line.to_lowercase().contains(&noun.to_lowercase());
    let article = words(line).find_map(|w| match w.as_str() {
        "a" => Some(Article::A),
        "an" => Some(Article::An),
        _ => None,
    });
    AnswerCheck {
        contains_answer,
        article,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers() {
        assert_eq!(
            answer_checks(" an elephant", "elephant"),
            AnswerCheck {
                contains_answer: true,
                article: Some(Article::An)
            }
        );
        assert_eq!(
            answer_checks(" a whale", "elephant"),
            AnswerCheck {
                contains_answer: false,
                article: Some(Article::A)
            }
        );
        assert_eq!(
            answer_checks("The answer is heart.", "heart"),
            AnswerCheck {
                contains_answer: true,
                article: None
            }
        );
        let second_line_ignored = answer_checks(" heart\nan elephant", "elephant");
        assert!(!second_line_ignored.contains_answer);
        assert_eq!(second_line_ignored.article, None);
        assert_eq!(answer_checks(" A Whale, or an eel", "whale").article, Some(Article::A));
        assert_eq!(answer_checks(" banana", "an").article, None);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |i| GenerationRecord {
            prompt_id: format!("-ight/test/{i}"),
            category: "-ight".into(),
            steered_toward: (i % 2 == 1).then(|| "-ake".to_string()),
            sample_index: i,
            prompt: "A rhyming couplet:\nx\n".into(),
            prompt_tokens: vec![1, 2, 3],
            completion: " softly bright\n".into(),
            completion_tokens: vec![9, 10, 198],
        };
        let c = CoupletCollection::new((0..3).map(rec).collect());
        let p = dir.path().join("c.jsonl");
        c.write_jsonl(&p).unwrap();
        assert_eq!(CoupletCollection::read_jsonl(&p).unwrap(), c);
        assert_eq!(c.records[1].expected_category(), "-ake");
        assert_eq!(c.records[0].first_line(), " softly bright");
        assert_eq!(c.by_category().len(), 1);
    }
}
