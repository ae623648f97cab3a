// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rhyme-family fractions and the regeneration protocol.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CoupletCollection, GenerationRecord, LexiconIndex};
use crate::error::{PlanError, Result};
use crate::runtime::{derive_seed, sample_completion, Model, RolloutConfig};
use crate::text::{first_word, strip_last_word, Vocabulary};

fn nonempty(collection: &CoupletCollection) -> Result<()> {
    if collection.is_empty() {
        return Err(PlanError::Metric("empty collection".into()));
    }
    Ok(())
}

/// Share of records whose second line ends in a word of `family`.
pub fn fraction_correct_rhyme_family(
    collection: &CoupletCollection,
    family: &str,
    lexicons: &LexiconIndex,
) -> Result<f64> {
    nonempty(collection)?;
    let hits = collection
        .records
        .iter()
        .filter(|r| lexicons.classify(r.first_line()) == Some(family))
        .count();
    Ok(hits as f64 / collection.len() as f64)
}

/// Share of records landing in the family they were steered toward.
pub fn fraction_correct_steered(collection: &CoupletCollection, lexicons: &LexiconIndex) -> Result<f64> {
    nonempty(collection)?;
    let mut target = None;
    for r in &collection.records {
        let t = r
            .steered_toward
            .as_deref()
            .ok_or_else(|| PlanError::Metric(format!("record `{}` was not steered", r.prompt_id)))?;
        match target {
            None => target = Some(t),
            Some(prev) if prev != t => {
                return Err(PlanError::Metric(format!(
                    "collection mixes steering targets `{prev}` and `{t}`"
                )))
            }
            _ => {}
        }
    }
    fraction_correct_rhyme_family(collection, target.expect("non-empty"), lexicons)
}

/// The record's second line alone, minus its last word.
pub fn build_regeneration_prompt(record: &GenerationRecord) -> Result<String> {
    strip_last_word(record.first_line())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegenerationOptions {
    pub samples_per_line: usize,
    /// Text put in front of each regeneration prompt. Empty by default.
    pub prefix: String,
    pub config: RolloutConfig,
}

impl Default for RegenerationOptions {
    fn default() -> Self {
        Self {
            samples_per_line: 1,
            prefix: String::new(),
            config: RolloutConfig {
                stop_on_newline: true,
                ..RolloutConfig::default()
            },
        }
    }
}

/// Regenerated-word tallies keyed by (expected family, regenerated family).
/// Words outside every lexicon are keyed by `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegenerationOutcome {
    pub counts: BTreeMap<(String, Option<String>), usize>,
    pub total: usize,
}

impl RegenerationOutcome {
    /// Share of regenerations that land in the expected family.
    pub fn rate(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(PlanError::Metric("no regenerations".into()));
        }
        let hits: usize = self
            .counts
            .iter()
            .filter(|((want, got), _)| got.as_deref() == Some(want.as_str()))
            .map(|(_, n)| n)
            .sum();
        Ok(hits as f64 / self.total as f64)
    }

    /// Share of `from`-prompt regenerations landing in `into`.
    pub fn cross_rate(&self, from: &str, into: &str) -> Option<f64> {
        let mut all = 0;
        let mut hit = 0;
        for ((want, got), &n) in &self.counts {
            if want == from {
                all += n;
                if got.as_deref() == Some(into) {
                    hit += n;
                }
            }
        }
        (all > 0).then(|| hit as f64 / all as f64)
    }

    pub fn families(&self) -> BTreeSet<&str> {
        self.counts.keys().map(|(f, _)| f.as_str()).collect()
    }

    pub fn merge(&mut self, other: &Self) {
        for (k, n) in &other.counts {
            *self.counts.entry(k.clone()).or_default() += n;
        }
        self.total += other.total;
    }
}

/// Regenerates the last word of every record's second line from the
/// stripped line and classifies the first word produced. Each record is
/// scored against its expected family (the steering target when steered).
pub fn regeneration_rate(
    model: &Model,
    vocab: &Vocabulary,
    collection: &CoupletCollection,
    lexicons: &LexiconIndex,
    options: &RegenerationOptions,
) -> Result<RegenerationOutcome> {
    nonempty(collection)?;
    if options.samples_per_line == 0 {
        return Err(PlanError::Metric("samples_per_line must be at least 1".into()));
    }
    let per_record: Vec<Vec<(String, Option<String>)>> = collection
        .records
        .par_iter()
        .enumerate()
        .map(|(ri, record)| {
            let text = format!("{}{}", options.prefix, build_regeneration_prompt(record)?);
            let tokens = vocab.encode(&text);
            (0..options.samples_per_line)
                .map(|si| {
                    let cfg = options
                        .config
                        .with_seed(derive_seed(options.config.seed, ri as u64, si as u64));
                    let out = sample_completion(model, &tokens, &cfg, None, vocab.newline_ids())?;
                    let produced = vocab.decode(&out)?;
                    let word = first_word(&produced).ok_or_else(|| {
                        PlanError::Metric(format!(
                            "no word regenerated from {text:?} within {} tokens (got {produced:?})",
                            cfg.max_new_tokens
                        ))
                    })?;
                    Ok((
                        record.expected_category().to_string(),
                        lexicons.category_of_word(&word).map(str::to_string),
                    ))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut outcome = RegenerationOutcome::default();
    for key in per_record.into_iter().flatten() {
        *outcome.counts.entry(key).or_default() += 1;
        outcome.total += 1;
    }
    Ok(outcome)
}

/// For each family F, the mean over the other families G of the rate at
/// which F-prompts regenerate into G.
pub fn regeneration_chance_baseline(outcome: &RegenerationOutcome) -> Result<BTreeMap<String, f64>> {
    let families = outcome.families();
    if families.len() < 2 {
        return Err(PlanError::Metric(format!(
            "chance baseline needs at least two families, got {}",
            families.len()
        )));
    }
    let mut out = BTreeMap::new();
    for &f in &families {
        let others: Vec<f64> = families
            .iter()
            .filter(|&&g| g != f)
            .map(|g| outcome.cross_rate(f, g).unwrap_or(0.0))
            .collect();
        out.insert(f.to_string(), others.iter().sum::<f64>() / others.len() as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CategoryKind, PromptCategory};

    fn lex() -> LexiconIndex {
        let cat = |id: &str, w: &[&str]| PromptCategory {
            id: id.into(),
            kind: CategoryKind::RhymeFamily,
            article: None,
            lexicon: w.iter().map(|s| s.to_string()).collect(),
            train_prompts: vec![],
            test_prompts: vec![],
            neutral_prompts: vec![],
        };
        LexiconIndex::new(&[cat("-ick", &["trick", "stick"]), cat("-ight", &["light", "night"])]).unwrap()
    }

    fn rec(line: &str, steered: Option<&str>) -> GenerationRecord {
        GenerationRecord {
            prompt_id: "p".into(),
            category: "-ick".into(),
            steered_toward: steered.map(str::to_string),
            sample_index: 0,
            prompt: String::new(),
            prompt_tokens: vec![],
            completion: format!("{line}\n"),
            completion_tokens: vec![],
        }
    }

    #[test]
    fn family_fractions() {
        let l = lex();
        let all = CoupletCollection::new(vec![rec("a b trick", None), rec("so Stick!", None)]);
        assert_eq!(fraction_correct_rhyme_family(&all, "-ick", &l).unwrap(), 1.0);
        assert_eq!(fraction_correct_rhyme_family(&all, "-ight", &l).unwrap(), 0.0);
        let mixed = CoupletCollection::new(vec![rec("the light", Some("-ight")), rec("the stick", Some("-ight"))]);
        assert_eq!(fraction_correct_steered(&mixed, &l).unwrap(), 0.5);
        assert!(fraction_correct_steered(&all, &l).is_err());
        assert!(fraction_correct_rhyme_family(&CoupletCollection::default(), "-ick", &l).is_err());
    }

    #[test]
    fn regeneration_prompts() {
        assert_eq!(
            build_regeneration_prompt(&rec("And stood for years, enduring every trick", None)).unwrap(),
            "And stood for years, enduring every"
        );
        assert_eq!(
            build_regeneration_prompt(&rec("Soaring above bathed in a golden light", None)).unwrap(),
            "Soaring above bathed in a golden"
        );
        assert!(build_regeneration_prompt(&rec("light", None)).is_err());
    }

    #[test]
    fn symmetric_cross_rates() {
        let mut o = RegenerationOutcome::default();
        let mut add = |w: &str, g: Option<&str>, n: usize| {
            o.counts.insert((w.into(), g.map(str::to_string)), n);
            o.total += n;
        };
        add("-ick", Some("-ick"), 6);
        add("-ick", Some("-ight"), 2);
        add("-ick", None, 2);
        add("-ight", Some("-ight"), 8);
        add("-ight", Some("-ick"), 2);
        assert_eq!(o.rate().unwrap(), 0.7);
        let b = regeneration_chance_baseline(&o).unwrap();
        assert_eq!(b["-ick"], 0.2);
        assert_eq!(b["-ight"], 0.2);
        let mut one = RegenerationOutcome::default();
        one.counts.insert(("-ick".into(), None), 1);
        one.total = 1;
        assert!(regeneration_chance_baseline(&one).is_err());
    }
}
