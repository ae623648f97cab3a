// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sampling completions for dataset prompts, with or without steering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CoupletCollection, Dataset, GenerationRecord, PromptCategory};
use crate::error::{PlanError, Result};
use crate::intervene::steering_plan;
use crate::runtime::{derive_seed, sample_completion, Model, RolloutConfig};
use crate::steer::SteeringVector;
use crate::text::{locate_anchors, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Neutral,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Neutral => "neutral",
        }
    }

    pub fn prompts(self, category: &PromptCategory) -> &[String] {
        match self {
            Split::Train => &category.train_prompts,
            Split::Test => &category.test_prompts,
            Split::Neutral => &category.neutral_prompts,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "neutral" => Ok(Split::Neutral),
            other => Err(PlanError::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

/// Full prompt texts and token ids for one category split.
pub fn tokenized_prompts(
    dataset: &Dataset,
    vocab: &Vocabulary,
    category: &str,
    split: Split,
) -> Result<Vec<(String, Vec<u32>)>> {
    let c = dataset.category(category)?;
    Ok(split
        .prompts(c)
        .iter()
        .map(|p| {
            let text = dataset.prompt(p);
            let tokens = vocab.encode(&text);
            (text, tokens)
        })
        .collect())
}

/// Samples `samples` completions per prompt of `category`'s `split`.
///
/// The seed of rollout `(i, s)` is `derive_seed(config.seed, i, s)`, so a
/// steered and an unsteered run over the same prompts share random streams.
pub fn generate_collection(
    model: &Model,
    vocab: &Vocabulary,
    dataset: &Dataset,
    category: &str,
    split: Split,
    samples: usize,
    config: &RolloutConfig,
    steering: Option<&SteeringVector>,
) -> Result<CoupletCollection> {
    if samples == 0 {
        return Err(PlanError::InvalidSpec("samples must be at least 1".into()));
    }
    let prompts = tokenized_prompts(dataset, vocab, category, split)?;
    if prompts.is_empty() {
        return Err(PlanError::Dataset(format!(
            "category `{category}` has no {} prompts",
            split.as_str()
        )));
    }
    let per_prompt: Vec<Vec<GenerationRecord>> = prompts
        .par_iter()
        .enumerate()
        .map(|(pi, (text, tokens))| {
            let plan = match steering {
                Some(v) => {
                    let anchors = locate_anchors(vocab, tokens)?;
                    Some(steering_plan(v, &anchors, v.anchor_kind)?)
                }
                None => None,
            };
            (0..samples)
                .map(|si| {
                    let cfg = config.with_seed(derive_seed(config.seed, pi as u64, si as u64));
                    let out = sample_completion(model, tokens, &cfg, plan.as_ref(), vocab.newline_ids())?;
                    Ok(GenerationRecord {
                        prompt_id: format!("{category}/{}/{pi}", split.as_str()),
                        category: category.to_string(),
                        steered_toward: steering.map(|v| v.target_category.clone()),
                        sample_index: si,
                        prompt: text.clone(),
                        prompt_tokens: tokens.clone(),
                        completion: vocab.decode(&out)?,
                        completion_tokens: out,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(CoupletCollection::new(per_prompt.into_iter().flatten().collect()))
}
