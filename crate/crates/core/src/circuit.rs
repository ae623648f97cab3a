// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head-output patching and attention ablation around a steered run.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::intervene::{
    attention_ablation_plan, logit_difference, patch_plan, patch_recovery_percentage, record_steered_snapshot,
    InterventionPlan,
};
use crate::runtime::{Capture, Model, NextTokenDistribution};

/// Logit difference `target - source` at the final position under three
/// runs, for one patched head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecovery {
    pub layer: usize,
    pub head: usize,
    pub unsteered: f64,
    pub patched: f64,
    pub steered: f64,
    pub recovery_percent: f64,
}

fn final_logits(model: &Model, tokens: &[u32], plan: Option<&InterventionPlan>) -> Result<Vec<f32>> {
    let out = model.forward(tokens, plan, &Capture::none())?;
    out.logits
        .into_iter()
        .last()
        .ok_or_else(|| PlanError::InvalidPlan("empty token sequence".into()))
}

/// Patches each head's final-position output from the steered run into the
/// unsteered run and reports how much of the steered logit difference
/// comes back.
pub fn head_patch_recoveries(
    model: &Model,
    tokens: &[u32],
    steering: &InterventionPlan,
    heads: &BTreeSet<(usize, usize)>,
    target_token: u32,
    source_token: u32,
) -> Result<Vec<HeadRecovery>> {
    let unsteered = logit_difference(&final_logits(model, tokens, None)?, target_token, source_token)?;
    let steered = logit_difference(
        &final_logits(model, tokens, Some(steering))?,
        target_token,
        source_token,
    )?;
    let snapshot = record_steered_snapshot(model, tokens, steering, heads)?;
    let mut out = Vec::with_capacity(heads.len());
    for &(layer, head) in heads {
        let mut one = snapshot.clone();
        one.entries.retain(|&(l, h, _), _| (l, h) == (layer, head));
        let plan = patch_plan(&one);
        let patched = logit_difference(&final_logits(model, tokens, Some(&plan))?, target_token, source_token)?;
        out.push(HeadRecovery {
            layer,
            head,
            unsteered,
            patched,
            steered,
            recovery_percent: patch_recovery_percentage(unsteered, patched, steered)?,
        });
    }
    Ok(out)
}

/// Every (layer, head) of the model.
pub fn all_heads(model: &Model) -> BTreeSet<(usize, usize)> {
    let s = model.spec();
    (0..s.layer_count)
        .flat_map(|l| (0..s.head_count).map(move |h| (l, h)))
        .collect()
}

/// Share of the next-token mass on `target` among `target` and `source`
/// tokens at the final position, with and without blocking attention to
/// `blocked`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub blocked: BTreeSet<usize>,
    pub before: f64,
    pub after: f64,
}

pub fn ablation_effect(
    model: &Model,
    tokens: &[u32],
    base: Option<&InterventionPlan>,
    blocked: BTreeSet<usize>,
    target: &[u32],
    source: &[u32],
) -> Result<AblationOutcome> {
    let share = |plan: Option<&InterventionPlan>| -> Result<f64> {
        let d = NextTokenDistribution::from_logits(&final_logits(model, tokens, plan)?);
        let t = d.mass(target.iter().copied());
        let s = d.mass(source.iter().copied());
        if t + s == 0.0 {
            return Err(PlanError::Metric("no mass on either token class".into()));
        }
        Ok(t / (t + s))
    };
    let ablation = attention_ablation_plan(blocked.clone(), tokens.len())?;
    let combined = match base {
        Some(p) => p.compose(&ablation)?,
        None => ablation,
    };
    Ok(AblationOutcome {
        before: share(base)?,
        after: share(Some(&combined))?,
        blocked,
    })
}
