// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mean-difference steering vectors: estimation, (layer, anchor) sweeps and
//! training-size curves.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PlanError, Result};
use crate::intervene::steering_plan;
use crate::runtime::{derive_seed, sample_completion, Capture, Container, Model, RolloutConfig, Tensor};
use crate::text::{locate_anchors, AnchorKind, Vocabulary};

pub const DEFAULT_MULTIPLIER: f32 = 1.5;

/// Rollouts per test prompt when scoring sweep cells.
pub const SWEEP_ROLLOUTS: usize = 10;

const VECTOR_TENSOR: &str = "steering_vector";

/// Direction added to the residual stream at one (layer, anchor) site,
/// steering from `source_category` toward `target_category`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub values: Vec<f32>,
    pub layer: usize,
    pub anchor_kind: AnchorKind,
    pub multiplier: f32,
    pub source_category: String,
    pub target_category: String,
    /// Hash of the token sequences the means were taken over.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_set_hash: Option<String>,
}

/// Site and labels for an estimated vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorLabel {
    pub layer: usize,
    pub anchor_kind: AnchorKind,
    pub source_category: String,
    pub target_category: String,
}

impl SteeringVector {
    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(PlanError::Steering("non-finite vector entry".into()));
        }
        if !self.multiplier.is_finite() || self.multiplier <= 0.0 {
            return Err(PlanError::Steering(format!(
                "multiplier must be positive, got {}",
                self.multiplier
            )));
        }
        Ok(())
    }

    /// Same site and multiplier, opposite direction and swapped labels.
    pub fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| -v).collect(),
            source_category: self.target_category.clone(),
            target_category: self.source_category.clone(),
            ..self.clone()
        }
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_container(&self) -> Container {
        let mut metadata = serde_json::Map::new();
        metadata.insert("layer".into(), self.layer.into());
        metadata.insert("anchor".into(), self.anchor_kind.as_str().into());
        metadata.insert("multiplier".into(), f64::from(self.multiplier).into());
        metadata.insert("source_category".into(), self.source_category.clone().into());
        metadata.insert("target_category".into(), self.target_category.clone().into());
        if let Some(h) = &self.train_set_hash {
            metadata.insert("train_set_hash".into(), h.clone().into());
        }
        Container {
            spec: None,
            metadata,
            tensors: vec![(VECTOR_TENSOR.into(), Tensor::vector(self.values.clone()))],
        }
    }

    pub fn from_container(container: &Container) -> Result<Self> {
        let meta = &container.metadata;
        let bad = |k: &str| PlanError::Container(format!("steering metadata `{k}` missing or invalid"));
        let str_field = |k: &str| meta.get(k).and_then(|v| v.as_str()).ok_or_else(|| bad(k));
        let tensor = container
            .get(VECTOR_TENSOR)
            .ok_or_else(|| PlanError::Container(format!("no `{VECTOR_TENSOR}` tensor")))?;
        let v = Self {
            values: tensor.data.clone(),
            layer: meta.get("layer").and_then(|v| v.as_u64()).ok_or_else(|| bad("layer"))? as usize,
            anchor_kind: str_field("anchor")?.parse()?,
            multiplier: meta
                .get("multiplier")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| bad("multiplier"))? as f32,
            source_category: str_field("source_category")?.to_string(),
            target_category: str_field("target_category")?.to_string(),
            train_set_hash: meta.get("train_set_hash").and_then(|v| v.as_str()).map(str::to_string),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Residual activation at `(layer, anchor)` for each prompt, from unsteered
/// runs.
pub fn collect_anchor_activations(
    model: &Model,
    vocab: &Vocabulary,
    prompts: &[Vec<u32>],
    layer: usize,
    anchor_kind: AnchorKind,
) -> Result<Vec<Vec<f32>>> {
    if layer >= model.spec().layer_count {
        return Err(PlanError::InterventionRange(format!(
            "layer {layer} >= layer_count {}",
            model.spec().layer_count
        )));
    }
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, tokens)| {
            let pos = locate_anchors(vocab, tokens)
                .and_then(|a| a.resolve(anchor_kind))
                .map_err(|e| PlanError::Anchor(format!("prompt {i}: {e}")))?;
            let out = model.forward(tokens, None, &Capture::residual_at(layer, pos))?;
            Ok(out
                .residual
                .get(layer, pos)
                .expect("requested site is captured")
                .to_vec())
        })
        .collect()
}

fn canonical_order(a: &[f32], b: &[f32]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Mean of `acts` in f64, summed over a canonically sorted copy so that the
/// result does not depend on input order.
fn mean(acts: &[Vec<f32>], dim: usize) -> Vec<f64> {
    let mut sorted: Vec<&[f32]> = acts.iter().map(Vec::as_slice).collect();
    sorted.sort_by(|a, b| canonical_order(a, b));
    let mut sum = vec![0f64; dim];
    for row in sorted {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += f64::from(v);
        }
    }
    let n = acts.len() as f64;
    sum.into_iter().map(|s| s / n).collect()
}

fn check_acts(acts: &[Vec<f32>], what: &str) -> Result<usize> {
    let dim = acts
        .first()
        .map(Vec::len)
        .ok_or_else(|| PlanError::Steering(format!("no {what} activations")))?;
    if let Some(bad) = acts.iter().find(|a| a.len() != dim) {
        return Err(PlanError::Steering(format!(
            "{what} activation of length {} differs from {dim}",
            bad.len()
        )));
    }
    Ok(dim)
}

/// `mean(acts_target) - mean(acts_source)`.
pub fn mean_difference(acts_source: &[Vec<f32>], acts_target: &[Vec<f32>]) -> Result<Vec<f32>> {
    let ds = check_acts(acts_source, "source")?;
    let dt = check_acts(acts_target, "target")?;
    if ds != dt {
        return Err(PlanError::Steering(format!(
            "source dimension {ds} != target dimension {dt}"
        )));
    }
    let ms = mean(acts_source, ds);
    let mt = mean(acts_target, dt);
    // f64 subtraction then rounding keeps s(A->B) == -s(B->A) exactly.
    Ok(mt.iter().zip(&ms).map(|(t, s)| (t - s) as f32).collect())
}

pub fn estimate_steering_vector(
    acts_source: &[Vec<f32>],
    acts_target: &[Vec<f32>],
    multiplier: f32,
    label: VectorLabel,
) -> Result<SteeringVector> {
    let v = SteeringVector {
        values: mean_difference(acts_source, acts_target)?,
        layer: label.layer,
        anchor_kind: label.anchor_kind,
        multiplier,
        source_category: label.source_category,
        target_category: label.target_category,
        train_set_hash: None,
    };
    v.validate()?;
    Ok(v)
}

/// Order-independent hash of two tokenized prompt sets.
pub fn train_set_hash(source: &[Vec<u32>], target: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    for set in [source, target] {
        let mut sorted: Vec<&Vec<u32>> = set.iter().collect();
        sorted.sort();
        h.update((sorted.len() as u64).to_le_bytes());
        for p in sorted {
            h.update((p.len() as u64).to_le_bytes());
            for t in p {
                h.update(t.to_le_bytes());
            }
        }
    }
    crate::runtime::container::hex_digest(&h.finalize())
}

/// Tokenized train prompts for one ordered category pair.
#[derive(Debug, Clone)]
pub struct PairPrompts {
    pub source_category: String,
    pub target_category: String,
    pub source_train: Vec<Vec<u32>>,
    pub target_train: Vec<Vec<u32>>,
}

impl PairPrompts {
    pub fn estimate(
        &self,
        model: &Model,
        vocab: &Vocabulary,
        layer: usize,
        anchor_kind: AnchorKind,
        multiplier: f32,
    ) -> Result<SteeringVector> {
        let src = collect_anchor_activations(model, vocab, &self.source_train, layer, anchor_kind)?;
        let tgt = collect_anchor_activations(model, vocab, &self.target_train, layer, anchor_kind)?;
        let mut v = estimate_steering_vector(
            &src,
            &tgt,
            multiplier,
            VectorLabel {
                layer,
                anchor_kind,
                source_category: self.source_category.clone(),
                target_category: self.target_category.clone(),
            },
        )?;
        v.train_set_hash = Some(train_set_hash(&self.source_train, &self.target_train));
        Ok(v)
    }
}

/// Scores a steering vector as the fraction of outcomes that land in the
/// target category.
pub trait EffectivenessEvaluator: Sync {
    fn effectiveness(&self, model: &Model, vector: &SteeringVector) -> Result<f64>;
}

/// Rolls out `samples` completions per test prompt under steering and
/// counts completions accepted by `is_target`.
pub struct RolloutEvaluator<'a, F> {
    pub vocab: &'a Vocabulary,
    pub test_prompts: &'a [Vec<u32>],
    pub config: RolloutConfig,
    pub samples: usize,
    pub is_target: F,
}

impl<F> EffectivenessEvaluator for RolloutEvaluator<'_, F>
where
    F: Fn(&[u32], &[u32]) -> bool + Sync,
{
    fn effectiveness(&self, model: &Model, vector: &SteeringVector) -> Result<f64> {
        if self.test_prompts.is_empty() || self.samples == 0 {
            return Err(PlanError::Steering("no test rollouts to evaluate".into()));
        }
        let hits: Vec<usize> = self
            .test_prompts
            .par_iter()
            .enumerate()
            .map(|(pi, prompt)| {
                let anchors = locate_anchors(self.vocab, prompt)?;
                let plan = steering_plan(vector, &anchors, vector.anchor_kind)?;
                let mut hits = 0;
                for si in 0..self.samples {
                    let cfg = self
                        .config
                        .with_seed(derive_seed(self.config.seed, pi as u64, si as u64));
                    let out = sample_completion(model, prompt, &cfg, Some(&plan), self.vocab.newline_ids())?;
                    if (self.is_target)(prompt, &out) {
                        hits += 1;
                    }
                }
                Ok(hits)
            })
            .collect::<Result<_>>()?;
        let total = (self.test_prompts.len() * self.samples) as f64;
        Ok(hits.iter().sum::<usize>() as f64 / total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub anchor: AnchorKind,
    pub effectiveness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub grid: BTreeMap<(usize, AnchorKind), f64>,
    pub best: (usize, AnchorKind),
}

impl SweepResult {
    /// Picks the maximum; ties go to the lowest layer, then anchor order.
    pub fn from_grid(grid: BTreeMap<(usize, AnchorKind), f64>) -> Result<Self> {
        let mut best: Option<((usize, AnchorKind), f64)> = None;
        for (&cell, &v) in &grid {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((cell, v));
            }
        }
        let (best, _) = best.ok_or_else(|| PlanError::Steering("empty sweep grid".into()))?;
        Ok(Self { grid, best })
    }

    pub fn best_effectiveness(&self) -> f64 {
        self.grid[&self.best]
    }

    pub fn cells(&self) -> Vec<SweepCell> {
        self.grid
            .iter()
            .map(|(&(layer, anchor), &effectiveness)| SweepCell {
                layer,
                anchor,
                effectiveness,
            })
            .collect()
    }
}

/// Layers kept when dropping the outer 10% at each end.
pub fn middle_layers(layer_count: usize) -> Vec<usize> {
    let skip = layer_count / 10;
    (skip..layer_count - skip).collect()
}

/// Estimates and scores a vector for every (layer, anchor) cell.
pub fn sweep(
    model: &Model,
    vocab: &Vocabulary,
    pair: &PairPrompts,
    layers: &BTreeSet<usize>,
    anchors: &BTreeSet<AnchorKind>,
    multiplier: f32,
    evaluator: &dyn EffectivenessEvaluator,
) -> Result<SweepResult> {
    if layers.is_empty() || anchors.is_empty() {
        return Err(PlanError::Steering(
            "sweep needs at least one layer and one anchor".into(),
        ));
    }
    let cells: Vec<(usize, AnchorKind)> = layers
        .iter()
        .flat_map(|&l| anchors.iter().map(move |&a| (l, a)))
        .collect();
    let scored: Vec<((usize, AnchorKind), f64)> = cells
        .par_iter()
        .map(|&(layer, anchor)| {
            pair.estimate(model, vocab, layer, anchor, multiplier)
                .and_then(|v| evaluator.effectiveness(model, &v))
                .and_then(|e| {
                    if (0.0..=1.0).contains(&e) {
                        Ok(e)
                    } else {
                        Err(PlanError::Steering(format!("effectiveness {e} outside [0, 1]")))
                    }
                })
                .map(|e| ((layer, anchor), e))
                .map_err(|e| PlanError::SweepCell {
                    layer,
                    anchor: anchor.to_string(),
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    SweepResult::from_grid(scored.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub mean_effectiveness: f64,
    pub runs: Vec<f64>,
}

/// Effectiveness of vectors estimated from `size` random train prompts per
/// category, averaged over `repeats` seeded draws.
#[allow(clippy::too_many_arguments)]
pub fn train_size_curve(
    model: &Model,
    vocab: &Vocabulary,
    pair: &PairPrompts,
    layer: usize,
    anchor_kind: AnchorKind,
    multiplier: f32,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
    evaluator: &dyn EffectivenessEvaluator,
) -> Result<Vec<CurvePoint>> {
    if repeats == 0 {
        return Err(PlanError::Steering("repeats must be >= 1".into()));
    }
    let available = pair.source_train.len().min(pair.target_train.len());
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size > available {
            return Err(PlanError::Steering(format!(
                "train size {size} outside 1..={available}"
            )));
        }
        let mut runs = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, size as u64, r as u64));
            let pick = |set: &[Vec<u32>], rng: &mut ChaCha8Rng| -> Vec<Vec<u32>> {
                if size == set.len() {
                    return set.to_vec();
                }
                sample(rng, set.len(), size)
                    .into_iter()
                    .map(|i| set[i].clone())
                    .collect()
            };
            let sub = PairPrompts {
                source_category: pair.source_category.clone(),
                target_category: pair.target_category.clone(),
                source_train: pick(&pair.source_train, &mut rng),
                target_train: pick(&pair.target_train, &mut rng),
            };
            let v = sub.estimate(model, vocab, layer, anchor_kind, multiplier)?;
            runs.push(evaluator.effectiveness(model, &v)?);
        }
        let mean_effectiveness = runs.iter().sum::<f64>() / runs.len() as f64;
        points.push(CurvePoint {
            size,
            mean_effectiveness,
            runs,
        });
    }
    Ok(points)
}

/// Powers of two up to `max`, with `max` appended when it is not one.
pub fn doubling_sizes(max: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut s = 1;
    while s <= max {
        out.push(s);
        s *= 2;
    }
    if out.last() != Some(&max) && max > 0 {
        out.push(max);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label() -> VectorLabel {
        VectorLabel {
            layer: 0,
            anchor_kind: AnchorKind::Newline,
            source_category: "a".into(),
            target_category: "b".into(),
        }
    }

    #[test]
    fn hand_mean_difference() {
        let s = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
        let t = vec![vec![0.0, 2.0], vec![0.0, 4.0]];
        let v = estimate_steering_vector(&s, &t, 1.5, label()).unwrap();
        assert_eq!(v.values, vec![-2.0, 3.0]);
        assert_eq!(v.multiplier, 1.5);
    }

    #[test]
    fn identical_sets_give_zero() {
        let s = vec![vec![0.1, -0.7, 3.3], vec![2.0, 1.0, 0.5]];
        assert!(mean_difference(&s, &s).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_errors() {
        assert!(mean_difference(&[], &[vec![1.0]]).is_err());
        assert!(mean_difference(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
        assert!(mean_difference(&[vec![1.0], vec![1.0, 2.0]], &[vec![1.0]]).is_err());
        assert!(estimate_steering_vector(&[vec![1.0]], &[vec![2.0]], 0.0, label()).is_err());
    }

    #[test]
    fn tie_break_prefers_low_layer_then_anchor_order() {
        let grid = BTreeMap::from([
            ((3, AnchorKind::LastWord), 0.9),
            ((1, AnchorKind::Newline), 0.9),
            ((1, AnchorKind::QuestionMark), 0.9),
            ((0, AnchorKind::LastWord), 0.2),
        ]);
        assert_eq!(SweepResult::from_grid(grid).unwrap().best, (1, AnchorKind::Newline));
        let one = BTreeMap::from([((5, AnchorKind::QuestionMark), 0.0)]);
        assert_eq!(SweepResult::from_grid(one).unwrap().best, (5, AnchorKind::QuestionMark));
        assert!(SweepResult::from_grid(BTreeMap::new()).is_err());
    }

    #[test]
    fn middle_layer_preset() {
        assert_eq!(middle_layers(2), vec![0, 1]);
        assert_eq!(middle_layers(26), (2..24).collect::<Vec<_>>());
        assert_eq!(middle_layers(10), (1..9).collect::<Vec<_>>());
    }

    #[test]
    fn sizes() {
        assert_eq!(doubling_sizes(8), vec![1, 2, 4, 8]);
        assert_eq!(doubling_sizes(85), vec![1, 2, 4, 8, 16, 32, 64, 85]);
    }

    #[test]
    fn container_round_trip() {
        let v = SteeringVector {
            values: vec![0.25, -1.5, 3.0],
            layer: 4,
            anchor_kind: AnchorKind::QuestionMark,
            multiplier: 1.5,
            source_category: "elephant".into(),
            target_category: "whale".into(),
            train_set_hash: Some(train_set_hash(&[vec![1, 2]], &[vec![3]])),
        };
        let bytes = v.to_container().to_bytes().unwrap();
        let back = SteeringVector::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn train_hash_ignores_order() {
        let a = vec![vec![1, 2], vec![3]];
        let b = vec![vec![3], vec![1, 2]];
        assert_eq!(train_set_hash(&a, &[vec![9]]), train_set_hash(&b, &[vec![9]]));
        assert_ne!(train_set_hash(&a, &[vec![9]]), train_set_hash(&[vec![9]], &a));
    }

    fn acts() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        (1usize..6).prop_flat_map(|d| {
            let row = prop::collection::vec(-1e3f32..1e3, d);
            (
                prop::collection::vec(row.clone(), 1..12),
                prop::collection::vec(row, 1..12),
            )
        })
    }

    proptest! {
        #[test]
        fn antisymmetric((s, t) in acts()) {
            let ab = mean_difference(&s, &t).unwrap();
            let ba = mean_difference(&t, &s).unwrap();
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert_eq!(*x, -*y);
            }
        }

        #[test]
        fn order_invariant((s, t) in acts(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s2 = s.clone();
            let mut t2 = t.clone();
            s2.shuffle(&mut rng);
            t2.shuffle(&mut rng);
            let a = mean_difference(&s, &t).unwrap();
            let b = mean_difference(&s2, &t2).unwrap();
            prop_assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
