// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interventions on a forward pass and the circuit-analysis operations built
//! on them.
//!
//! Three intervention kinds are supported:
//!
//! - **Residual addition**: add `multiplier * vector` to the residual stream
//!   leaving block `layer` at one position (single-token steering).
//! - **Head output patch**: replace one head's output (before the output
//!   projection) at one position.
//! - **Attention ablation**: mask a set of key positions with `-inf` before
//!   the softmax for every query at or after them, so the remaining keys
//!   renormalize.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::runtime::{Capture, Model};
use crate::steer::SteeringVector;
use crate::text::{AnchorKind, PositionAnchors};

/// One modification applied during a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    ResidualAdd {
        layer: usize,
        position: usize,
        vector: Vec<f32>,
        multiplier: f32,
    },
    HeadOutputPatch {
        layer: usize,
        head: usize,
        position: usize,
        replacement: Vec<f32>,
    },
    AttentionAblation {
        blocked_key_positions: BTreeSet<usize>,
        /// Restrict the mask to these layers; `None` means every layer.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layers: Option<BTreeSet<usize>>,
    },
}

/// Ordered list of interventions with at most one residual addition and one
/// head patch per site.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    interventions: Vec<Intervention>,
}

impl InterventionPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_interventions(items: impl IntoIterator<Item = Intervention>) -> Result<Self> {
        let mut plan = Self::new();
        for i in items {
            plan.push(i)?;
        }
        Ok(plan)
    }

    pub fn push(&mut self, item: Intervention) -> Result<()> {
        match &item {
            Intervention::ResidualAdd { layer, position, .. } => {
                if self.residual_sites().any(|s| s == (*layer, *position)) {
                    return Err(PlanError::InvalidPlan(format!(
                        "second residual addition at layer {layer}, position {position}"
                    )));
                }
            }
            Intervention::HeadOutputPatch {
                layer, head, position, ..
            } => {
                let dup = self.interventions.iter().any(|i| {
                    matches!(i, Intervention::HeadOutputPatch { layer: l, head: h, position: p, .. }
                        if (l, h, p) == (layer, head, position))
                });
                if dup {
                    return Err(PlanError::InvalidPlan(format!(
                        "second patch for layer {layer} head {head} position {position}"
                    )));
                }
            }
            Intervention::AttentionAblation { .. } => {}
        }
        self.interventions.push(item);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Intervention> {
        self.interventions.iter()
    }

    pub fn len(&self) -> usize {
        self.interventions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interventions.is_empty()
    }

    fn residual_sites(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.interventions.iter().filter_map(|i| match i {
            Intervention::ResidualAdd { layer, position, .. } => Some((*layer, *position)),
            _ => None,
        })
    }

    /// Same plan with every residual vector negated.
    pub fn negated(&self) -> Self {
        let interventions = self
            .interventions
            .iter()
            .map(|i| match i {
                Intervention::ResidualAdd {
                    layer,
                    position,
                    vector,
                    multiplier,
                } => Intervention::ResidualAdd {
                    layer: *layer,
                    position: *position,
                    vector: vector.iter().map(|v| -v).collect(),
                    multiplier: *multiplier,
                },
                other => other.clone(),
            })
            .collect();
        Self { interventions }
    }

    /// Applies `self` then `other`. Residual additions at a shared site are
    /// folded into one addition of `m1*v1 + m2*v2` with multiplier 1.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        for item in &other.interventions {
            if let Intervention::ResidualAdd {
                layer,
                position,
                vector,
                multiplier,
            } = item
            {
                let existing = out.interventions.iter_mut().find(|i| {
                    matches!(i, Intervention::ResidualAdd { layer: l, position: p, .. }
                        if (l, p) == (layer, position))
                });
                if let Some(Intervention::ResidualAdd {
                    vector: v0,
                    multiplier: m0,
                    ..
                }) = existing
                {
                    if v0.len() != vector.len() {
                        return Err(PlanError::InvalidPlan("vector length mismatch".into()));
                    }
                    let folded = v0.iter().zip(vector).map(|(a, b)| *m0 * a + *multiplier * b).collect();
                    *v0 = folded;
                    *m0 = 1.0;
                    continue;
                }
            }
            out.push(item.clone())?;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(s)?;
        Self::from_interventions(raw.interventions)
    }
}

/// Head outputs recorded from a designated run, keyed by (layer, head, position).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationSnapshot {
    pub entries: BTreeMap<(usize, usize, usize), Vec<f32>>,
}

impl ActivationSnapshot {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One residual addition of `vector` at the resolved anchor position.
pub fn steering_plan(
    vector: &SteeringVector,
    anchors: &PositionAnchors,
    anchor_kind: AnchorKind,
) -> Result<InterventionPlan> {
    let position = anchors.resolve(anchor_kind)?;
    InterventionPlan::from_interventions([Intervention::ResidualAdd {
        layer: vector.layer,
        position,
        vector: vector.values.clone(),
        multiplier: vector.multiplier,
    }])
}

/// Runs `tokens` under `plan` and records the listed heads' outputs at the
/// final position.
pub fn record_steered_snapshot(
    model: &Model,
    tokens: &[u32],
    plan: &InterventionPlan,
    heads: &BTreeSet<(usize, usize)>,
) -> Result<ActivationSnapshot> {
    let spec = model.spec();
    for &(l, h) in heads {
        if l >= spec.layer_count || h >= spec.head_count {
            return Err(PlanError::InterventionRange(format!(
                "head ({l}, {h}) outside {} layers x {} heads",
                spec.layer_count, spec.head_count
            )));
        }
    }
    if heads.is_empty() {
        return Ok(ActivationSnapshot::default());
    }
    let last = tokens
        .len()
        .checked_sub(1)
        .ok_or_else(|| PlanError::InvalidPlan("cannot snapshot an empty sequence".into()))?;
    let out = model.forward(tokens, Some(plan), &Capture::head_outputs())?;
    let mut entries = BTreeMap::new();
    for &(l, h) in heads {
        let v = out
            .attention
            .head_outputs
            .get(&(l, h, last))
            .expect("head outputs captured for every position");
        entries.insert((l, h, last), v.clone());
    }
    Ok(ActivationSnapshot { entries })
}

/// Plan that substitutes every recorded head output.
pub fn patch_plan(snapshot: &ActivationSnapshot) -> InterventionPlan {
    let interventions = snapshot
        .entries
        .iter()
        .map(|(&(layer, head, position), v)| Intervention::HeadOutputPatch {
            layer,
            head,
            position,
            replacement: v.clone(),
        })
        .collect();
    InterventionPlan { interventions }
}

/// `logit(token_a) - logit(token_b)`.
pub fn logit_difference(logits: &[f32], token_a: u32, token_b: u32) -> Result<f64> {
    let get = |t: u32| {
        logits
            .get(t as usize)
            .map(|&v| f64::from(v))
            .ok_or(PlanError::UnknownToken {
                id: t,
                vocab: logits.len(),
            })
    };
    Ok(get(token_a)? - get(token_b)?)
}

/// Share of the steering-induced logit difference reproduced by a patch, in
/// percent.
pub fn patch_recovery_percentage(unsteered: f64, patched: f64, steered: f64) -> Result<f64> {
    let denom = steered - unsteered;
    if denom == 0.0 || !denom.is_finite() {
        return Err(PlanError::Metric(
            "steered and unsteered logit differences are equal".into(),
        ));
    }
    Ok(100.0 * (patched - unsteered) / denom)
}

/// [`patch_recovery_percentage`] rounded to the nearest integer, as reported
/// in circuit tables.
pub fn patch_recovery_rounded(unsteered: f64, patched: f64, steered: f64) -> Result<i64> {
    Ok(patch_recovery_percentage(unsteered, patched, steered)?.round() as i64)
}

/// Masks attention to `blocked` for all later queries in every layer.
///
/// `seq_len` is the length of the sequence the plan will run on.
pub fn attention_ablation_plan(blocked: BTreeSet<usize>, seq_len: usize) -> Result<InterventionPlan> {
    if let Some(&p) = blocked.iter().find(|&&p| p >= seq_len) {
        return Err(PlanError::InterventionRange(format!(
            "blocked position {p} outside sequence of length {seq_len}"
        )));
    }
    // Query 0 only sees key 0.
    if blocked.contains(&0) {
        return Err(PlanError::InvalidPlan(
            "blocking position 0 leaves query 0 with no keys".into(),
        ));
    }
    InterventionPlan::from_interventions([Intervention::AttentionAblation {
        blocked_key_positions: blocked,
        layers: None,
    }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_recoveries() {
        let rows = [
            ((-2.6, 4.61, 5.48), 89),
            ((-3.37, 1.47, 4.77), 59),
            ((-14.5, 2.06, 3.39), 93),
            ((-4.94, -1.07, 0.93), 66),
        ];
        for ((u, p, s), want) in rows {
            assert_eq!(patch_recovery_rounded(u, p, s).unwrap(), want);
        }
    }

    #[test]
    fn recovery_edge_cases() {
        assert_eq!(patch_recovery_percentage(-1.0, 3.0, 3.0).unwrap(), 100.0);
        assert!(patch_recovery_percentage(2.0, 1.0, 2.0).is_err());
        // affine invariance
        let a = patch_recovery_percentage(-2.6, 4.61, 5.48).unwrap();
        let b = patch_recovery_percentage(-2.6 + 7.0, 4.61 + 7.0, 5.48 + 7.0).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn logit_difference_basics() {
        let l = [1.0f32, 1.0, -2.5];
        assert_eq!(logit_difference(&l, 0, 1).unwrap(), 0.0);
        assert_eq!(
            logit_difference(&l, 0, 2).unwrap(),
            -logit_difference(&l, 2, 0).unwrap()
        );
        assert!(logit_difference(&l, 0, 3).is_err());
    }

    #[test]
    fn duplicate_residual_site_rejected() {
        let add = Intervention::ResidualAdd {
            layer: 1,
            position: 2,
            vector: vec![0.0; 4],
            multiplier: 1.5,
        };
        let mut plan = InterventionPlan::new();
        plan.push(add.clone()).unwrap();
        assert!(plan.push(add).is_err());
    }

    #[test]
    fn compose_with_negation_cancels_exactly() {
        let plan = InterventionPlan::from_interventions([Intervention::ResidualAdd {
            layer: 0,
            position: 3,
            vector: vec![0.3, -1.7, 2.2],
            multiplier: 1.5,
        }])
        .unwrap();
        let both = plan.compose(&plan.negated()).unwrap();
        assert_eq!(both.len(), 1);
        let first = both.iter().next().unwrap();
        match first {
            Intervention::ResidualAdd { vector, .. } => assert!(vector.iter().all(|&v| v == 0.0)),
            _ => unreachable!(),
        };
    }

    #[test]
    fn plan_json_round_trip_is_tagged() {
        let plan = InterventionPlan::from_interventions([
            Intervention::HeadOutputPatch {
                layer: 1,
                head: 2,
                position: 5,
                replacement: vec![0.5; 2],
            },
            Intervention::AttentionAblation {
                blocked_key_positions: [3, 4].into(),
                layers: None,
            },
        ])
        .unwrap();
        let json = plan.to_json().unwrap();
        assert!(json.contains("\"kind\": \"head_output_patch\""));
        assert_eq!(InterventionPlan::from_json(&json).unwrap(), plan);
    }

    #[test]
    fn ablation_plan_validation() {
        assert!(attention_ablation_plan([0].into(), 4).is_err());
        assert!(attention_ablation_plan([5].into(), 4).is_err());
        assert_eq!(attention_ablation_plan([1, 3].into(), 4).unwrap().len(), 1);
    }
}
