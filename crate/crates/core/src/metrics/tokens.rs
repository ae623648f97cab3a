// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tokenization and embedding statistics over category lexicons.

use serde::{Deserialize, Serialize};

use crate::corpus::PromptCategory;
use crate::error::{PlanError, Result};
use crate::runtime::Tensor;
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleTokenFraction {
    pub words: usize,
    /// Word encoded on its own.
    pub bare: f64,
    /// Word with one leading space.
    pub spaced: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTokenStats {
    pub category: String,
    #[serde(flatten)]
    pub single_token: SingleTokenFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub within_family: f64,
    pub across_families: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub per_category: Vec<CategoryTokenStats>,
    pub overall: SingleTokenFraction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine: Option<CosineReport>,
}

fn single_token(vocab: &Vocabulary, words: &[&String]) -> SingleTokenFraction {
    let n = words.len().max(1) as f64;
    let count = |f: &dyn Fn(&str) -> String| words.iter().filter(|w| vocab.encode(&f(w)).len() == 1).count() as f64 / n;
    SingleTokenFraction {
        words: words.len(),
        bare: count(&|w| w.to_string()),
        spaced: count(&|w| format!(" {w}")),
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Single-token fractions per category and overall. With `embeddings`
/// (a `[vocab, d]` table) also the mean cosine between the last-token
/// embeddings of space-prefixed words, within and across families.
pub fn token_stats(
    vocab: &Vocabulary,
    categories: &[PromptCategory],
    embeddings: Option<&Tensor>,
) -> Result<TokenStats> {
    if categories.is_empty() {
        return Err(PlanError::Metric("no categories".into()));
    }
    let mut per_category = Vec::new();
    let mut all = Vec::new();
    for c in categories {
        if c.lexicon.is_empty() {
            return Err(PlanError::Metric(format!("category `{}` has an empty lexicon", c.id)));
        }
        let words: Vec<&String> = c.lexicon.iter().collect();
        all.extend(words.iter().copied());
        per_category.push(CategoryTokenStats {
            category: c.id.clone(),
            single_token: single_token(vocab, &words),
        });
    }
    all.sort();
    all.dedup();
    let overall = single_token(vocab, &all);

    let cosine = match embeddings {
        None => None,
        Some(table) => {
            if table.shape.len() != 2 || table.shape[0] < vocab.len() {
                return Err(PlanError::Metric(format!(
                    "embedding table shape {:?} does not cover {} tokens",
                    table.shape,
                    vocab.len()
                )));
            }
            let rows: Vec<Vec<&[f32]>> = categories
                .iter()
                .map(|c| {
                    c.lexicon
                        .iter()
                        .filter_map(|w| vocab.encode(&format!(" {w}")).last().map(|&t| table.row(t as usize)))
                        .collect()
                })
                .collect();
            let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
            for (i, fi) in rows.iter().enumerate() {
                for (a, x) in fi.iter().enumerate() {
                    for y in &fi[a + 1..] {
                        within += cosine(x, y);
                        nw += 1;
                    }
                    for fj in &rows[i + 1..] {
                        for y in fj {
                            across += cosine(x, y);
                            na += 1;
                        }
                    }
                }
            }
            if nw == 0 || na == 0 {
                return Err(PlanError::Metric(
                    "cosine report needs two families with two words each".into(),
                ));
            }
            Some(CosineReport {
                within_family: within / nw as f64,
                across_families: across / na as f64,
            })
        }
    };
    Ok(TokenStats {
        per_category,
        overall,
        cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CategoryKind;

    fn cat(id: &str, words: &[&str]) -> PromptCategory {
        PromptCategory {
            id: id.into(),
            kind: CategoryKind::RhymeFamily,
            article: None,
            lexicon: words.iter().map(|s| s.to_string()).collect(),
            train_prompts: vec![],
            test_prompts: vec![],
            neutral_prompts: vec![],
        }
    }

    #[test]
    fn single_characters_are_single_tokens() {
        let v = Vocabulary::byte_level_with_words::<&str>(&[]).unwrap();
        let s = token_stats(&v, &[cat("x", &["a", "b"]), cat("y", &["c"])], None).unwrap();
        assert_eq!(s.overall.bare, 1.0);
        assert_eq!(s.overall.spaced, 0.0);
        assert_eq!(s.overall.words, 3);
    }

    #[test]
    fn merged_words_and_cosines() {
        let v = Vocabulary::byte_level_with_words(&[" light", " night", " cake"]).unwrap();
        let cats = [cat("-ight", &["light", "night"]), cat("-ake", &["cake", "lake"])];
        let s = token_stats(&v, &cats, None).unwrap();
        assert_eq!(s.per_category[0].single_token.spaced, 1.0);
        assert_eq!(s.per_category[1].single_token.spaced, 0.5);
        assert!(s.cosine.is_none());
        let d = 2;
        let mut table = Tensor::zeros(vec![v.len(), d]);
        for w in ["light", "night"] {
            let t = *v.encode(&format!(" {w}")).last().unwrap() as usize;
            table.data[t * d] = 1.0;
        }
        for w in ["cake", "lake"] {
            let t = *v.encode(&format!(" {w}")).last().unwrap() as usize;
            table.data[t * d + 1] = 1.0;
        }
        let c = token_stats(&v, &cats, Some(&table)).unwrap().cosine.unwrap();
        assert_eq!(c.within_family, 1.0);
        assert_eq!(c.across_families, 0.0);
        assert!(token_stats(&v, &cats, Some(&Tensor::zeros(vec![3, d]))).is_err());
    }
}
