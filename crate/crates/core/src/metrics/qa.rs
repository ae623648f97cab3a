// SPDX-License-Identifier: MIT OR Apache-2.0

//! Answer-noun and marker-token fractions for question answering.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{answer_checks, words, Article, CoupletCollection};
use crate::error::{PlanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaFractions {
    pub correct_answer: f64,
    pub a: f64,
    pub an: f64,
}

/// Means of [`answer_checks`] against `noun` over all records.
pub fn qa_fractions(collection: &CoupletCollection, noun: &str) -> Result<QaFractions> {
    if collection.is_empty() {
        return Err(PlanError::Metric("empty collection".into()));
    }
    let (mut hit, mut a, mut an) = (0usize, 0usize, 0usize);
    for r in &collection.records {
        let c = answer_checks(&r.completion, noun);
        hit += c.contains_answer as usize;
        match c.article {
            Some(Article::A) => a += 1,
            Some(Article::An) => an += 1,
            None => {}
        }
    }
    let n = collection.len() as f64;
    Ok(QaFractions {
        correct_answer: hit as f64 / n,
        a: a as f64 / n,
        an: an as f64 / n,
    })
}

/// [`qa_fractions`] against each record's expected noun (the steering
/// target when steered). Category ids are the nouns.
pub fn qa_fractions_expected(collection: &CoupletCollection) -> Result<QaFractions> {
    if collection.is_empty() {
        return Err(PlanError::Metric("empty collection".into()));
    }
    let mut sum = QaFractions {
        correct_answer: 0.0,
        a: 0.0,
        an: 0.0,
    };
    for r in &collection.records {
        let one = CoupletCollection::new(vec![r.clone()]);
        let f = qa_fractions(&one, r.expected_category())?;
        sum.correct_answer += f.correct_answer;
        sum.a += f.a;
        sum.an += f.an;
    }
    let n = collection.len() as f64;
    Ok(QaFractions {
        correct_answer: sum.correct_answer / n,
        a: sum.a / n,
        an: sum.an / n,
    })
}

/// Per class, the share of records whose first line contains one of the
/// class's markers as a standalone word.
pub fn marker_fraction(
    collection: &CoupletCollection,
    classes: &BTreeMap<String, BTreeSet<String>>,
) -> Result<BTreeMap<String, f64>> {
    if collection.is_empty() {
        return Err(PlanError::Metric("empty collection".into()));
    }
    let mut owner: BTreeMap<String, &str> = BTreeMap::new();
    for (class, markers) in classes {
        for m in markers {
            let m = m.trim().to_lowercase();
            if let Some(prev) = owner.insert(m.clone(), class) {
                return Err(PlanError::Metric(format!(
                    "marker `{m}` belongs to both `{prev}` and `{class}`"
                )));
            }
        }
    }
    let mut counts: BTreeMap<String, usize> = classes.keys().map(|c| (c.clone(), 0)).collect();
    for r in &collection.records {
        let present: BTreeSet<&str> = words(r.first_line()).filter_map(|w| owner.get(&w).copied()).collect();
        for c in present {
            *counts.get_mut(c).expect("class registered") += 1;
        }
    }
    let n = collection.len() as f64;
    Ok(counts.into_iter().map(|(c, k)| (c, k as f64 / n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GenerationRecord;

    fn coll(answers: &[&str]) -> CoupletCollection {
        CoupletCollection::new(
            answers
                .iter()
                .map(|a| GenerationRecord {
                    prompt_id: "p".into(),
                    category: "elephant".into(),
                    steered_toward: None,
                    sample_index: 0,
                    prompt: String::new(),
                    prompt_tokens: vec![],
                    completion: a.to_string(),
                    completion_tokens: vec![],
                })
                .collect(),
        )
    }

    #[test]
    fn fractions() {
        let c = coll(&[" an elephant\n", " an elephant"]);
        let f = qa_fractions(&c, "elephant").unwrap();
        assert_eq!((f.correct_answer, f.a, f.an), (1.0, 0.0, 1.0));
        let f = qa_fractions(
            &coll(&[" a whale", " an elephant\nthen a whale", " elephants"]),
            "elephant",
        )
        .unwrap();
        assert_eq!(f.correct_answer, 2.0 / 3.0);
        assert_eq!(f.a, 1.0 / 3.0);
        assert!(qa_fractions(&coll(&[]), "x").is_err());
        assert_eq!(qa_fractions_expected(&c).unwrap().correct_answer, 1.0);
    }

    #[test]
    fn markers() {
        let classes: BTreeMap<String, BTreeSet<String>> = [
            ("is".to_string(), ["is".to_string()].into()),
            ("are".to_string(), ["are".to_string()].into()),
        ]
        .into();
        let m = marker_fraction(&coll(&[" is 1", " is 2"]), &classes).unwrap();
        assert_eq!((m["is"], m["are"]), (1.0, 0.0));
        let m = marker_fraction(&coll(&[" this island"]), &classes).unwrap();
        assert_eq!((m["is"], m["are"]), (0.0, 0.0));
        let bad: BTreeMap<String, BTreeSet<String>> = [
            ("x".to_string(), ["is".to_string()].into()),
            ("y".to_string(), ["Is".to_string()].into()),
        ]
        .into();
        assert!(marker_fraction(&coll(&[" is"]), &bad).is_err());
    }
}
