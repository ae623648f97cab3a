// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ready-made planted worlds: a vocabulary, a planted spec and a dataset
//! whose prompts exercise it.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{bundled, CategoryKind, CategoryPair, Dataset, PromptCategory, PromptTemplate};
use crate::error::{PlanError, Result};
use crate::planted::build::build_planted_model;
use crate::planted::spec::{GroundTruth, PlantedSide, PlantedSpec};
use crate::runtime::Model;
use crate::text::Vocabulary;

pub const WORLD_NAMES: [&str; 4] = ["synthetic", "control", "micro_rhyme", "micro_qa"];

#[derive(Debug, Clone)]
pub struct PlantedWorld {
    pub name: String,
    pub vocab: Vocabulary,
    pub spec: PlantedSpec,
    pub dataset: Dataset,
}

/// A built planted model with its ground truth.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub model: Model,
    pub truth: GroundTruth,
}

impl PlantedWorld {
    pub fn build(&self) -> Result<PlantedModel> {
        let (spec, weights, truth) = build_planted_model(&self.spec, &self.vocab)?;
        Ok(PlantedModel {
            model: Model::new(spec, weights)?,
            truth,
        })
    }

    /// Marker classes keyed by category id, as word sets.
    pub fn marker_classes(&self) -> std::collections::BTreeMap<String, BTreeSet<String>> {
        self.spec
            .sides()
            .iter()
            .map(|s| (s.category.clone(), [s.marker.trim().to_string()].into()))
            .collect()
    }
}

pub fn world(name: &str) -> Result<PlantedWorld> {
    match name {
        "synthetic" => synthetic_world(2.0),
        "control" => synthetic_world(0.0),
        "micro_rhyme" => micro_rhyme_world(),
        "micro_qa" => micro_qa_world(),
        other => Err(PlanError::Planted(format!(
            "unknown world `{other}` (expected one of {})",
            WORLD_NAMES.join(", ")
        ))),
    }
}

fn spaced(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| format!(" {w}")).collect()
}

/// Vocabulary with one token per space-prefixed word of `extra` and of the
/// dataset text.
fn world_vocab(spec: &PlantedSpec, dataset: &Dataset) -> Result<Vocabulary> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    for s in spec.sides() {
        words.extend(s.category_tokens.iter().cloned());
        words.extend(s.cue_tokens.iter().cloned());
        words.insert(s.marker.clone());
    }
    let t = &dataset.template;
    let mut text = format!("{} {}", t.preamble, t.postamble);
    for c in &dataset.categories {
        for p in c.train_prompts.iter().chain(&c.test_prompts).chain(&c.neutral_prompts) {
            text.push(' ');
            text.push_str(p);
        }
    }
    for w in text.split_whitespace() {
        let w: String = w.chars().filter(|c| c.is_alphabetic()).collect();
        if !w.is_empty() {
            words.insert(format!(" {w}"));
        }
    }
    let words: Vec<String> = words.into_iter().collect();
    Vocabulary::byte_level_with_words(&words)
}

const SYNTH_FILLER: [&str; 12] = [
    "old", "small", "quiet", "far", "soft", "long", "deep", "green", "tall", "wild", "calm", "late",
];

/// Two colour classes chosen by temperature cues, eight category tokens per
/// side. `marker_coupling` 0 gives the control world, where the marker
/// carries no information about the category.
pub fn synthetic_world(marker_coupling: f64) -> Result<PlantedWorld> {
    let a = PlantedSide {
        category: "red".into(),
        category_tokens: spaced(&[
            "ruby", "coral", "amber", "scarlet", "crimson", "rose", "cherry", "flame",
        ]),
        marker: " warm".into(),
        cue_tokens: spaced(&["fire", "sun", "ember", "blaze"]),
    };
    let b = PlantedSide {
        category: "blue".into(),
        category_tokens: spaced(&["azure", "cobalt", "navy", "teal", "indigo", "sapphire", "cyan", "denim"]),
        marker: " cool".into(),
        cue_tokens: spaced(&["ice", "snow", "frost", "sea"]),
    };
    let mut spec = PlantedSpec::new(a, b, "\n", "\n");
    spec.marker_coupling = marker_coupling;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut categories = Vec::new();
    for side in spec.sides() {
        let mut lines = BTreeSet::new();
        let mut ordered = Vec::new();
        while ordered.len() < 28 {
            let n = rng.gen_range(1..=4);
            let mut words: Vec<&str> = SYNTH_FILLER.choose_multiple(&mut rng, n).copied().collect();
            let cue = side.cue_tokens.choose(&mut rng).expect("cues").trim();
            words.push(cue);
            let line = words.join(" ");
            if lines.insert(line.clone()) {
                ordered.push(line);
            }
        }
        let test = ordered.split_off(8);
        categories.push(PromptCategory {
            id: side.category.clone(),
            kind: CategoryKind::MarkerClass,
            article: None,
            lexicon: side.category_tokens.iter().map(|t| t.trim().to_string()).collect(),
            train_prompts: ordered,
            test_prompts: test,
            neutral_prompts: vec![],
        });
    }
    let dataset = Dataset {
        name: if marker_coupling == 0.0 { "control" } else { "synthetic" }.into(),
        template: PromptTemplate {
            preamble: "Palette:\n".into(),
            separator: String::new(),
            postamble: "\n".into(),
        },
        pairs: vec![
            CategoryPair {
                source: "red".into(),
                target: "blue".into(),
                kind: CategoryKind::MarkerClass,
            },
            CategoryPair {
                source: "blue".into(),
                target: "red".into(),
                kind: CategoryKind::MarkerClass,
            },
        ],
        categories,
    };
    let vocab = world_vocab(&spec, &dataset)?;
    Ok(PlantedWorld {
        name: dataset.name.clone(),
        vocab,
        spec,
        dataset,
    })
}

/// Planted model over the bundled `micro_rhyme` dataset: the second line is
/// an adverb marker followed by a rhyme word.
pub fn micro_rhyme_world() -> Result<PlantedWorld> {
    let dataset = bundled("micro_rhyme")?;
    let a = PlantedSide {
        category: "-ight".into(),
        category_tokens: spaced(&["bright", "white", "tight", "delight"]),
        marker: " softly".into(),
        cue_tokens: spaced(&["light", "kite", "night", "flight", "height", "sight"]),
    };
    let b = PlantedSide {
        category: "-ake".into(),
        category_tokens: spaced(&["shake", "make", "take", "awake"]),
        marker: " slowly".into(),
        cue_tokens: spaced(&["cake", "lake", "snake", "rake", "flake", "wake"]),
    };
    let spec = PlantedSpec::new(a, b, "\n", "\n");
    let vocab = world_vocab(&spec, &dataset)?;
    Ok(PlantedWorld {
        name: "micro_rhyme".into(),
        vocab,
        spec,
        dataset,
    })
}

/// Planted model over the bundled `micro_qa` dataset: the answer is an
/// article followed by the noun.
pub fn micro_qa_world() -> Result<PlantedWorld> {
    let dataset = bundled("micro_qa")?;
    let a = PlantedSide {
        category: "elephant".into(),
        category_tokens: spaced(&["elephant"]),
        marker: " an".into(),
        cue_tokens: spaced(&["trunk", "tusks"]),
    };
    let b = PlantedSide {
        category: "whale".into(),
        category_tokens: spaced(&["whale"]),
        marker: " a".into(),
        cue_tokens: spaced(&["blowhole", "krill", "baleen"]),
    };
    let spec = PlantedSpec::new(a, b, "\n", ":");
    let vocab = world_vocab(&spec, &dataset)?;
    Ok(PlantedWorld {
        name: "micro_qa".into(),
        vocab,
        spec,
        dataset,
    })
}
