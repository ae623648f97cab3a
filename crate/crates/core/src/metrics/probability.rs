// SPDX-License-Identifier: MIT OR Apache-2.0

//! Divergence between baseline and steered next-token distributions over
//! the generated second line.

use serde::{Deserialize, Serialize};

use crate::corpus::GenerationRecord;
use crate::error::{PlanError, Result};
use crate::intervene::steering_plan;
use crate::runtime::{Model, NextTokenDistribution};
use crate::steer::SteeringVector;
use crate::text::{locate_anchors, second_line_span, Vocabulary};

/// KL threshold, in nats, for a "high KL" position.
pub const HIGH_KL_THRESHOLD: f64 = 1.0;

/// `sum p ln(p / q)` in nats. Terms with `p == 0` contribute 0.
pub fn kl_divergence(p: &NextTokenDistribution, q: &NextTokenDistribution) -> Result<f64> {
    kl_slices(&p.probs, &q.probs)
}

pub(crate) fn kl_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(PlanError::Metric(format!(
            "distribution sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            kl += a * (a / b).ln();
        }
    }
    // Rounding can leave tiny negatives for p ~= q.
    Ok(kl.max(0.0))
}

/// Baseline and steered distributions over one record's second line.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionTracePair {
    pub baseline: Vec<NextTokenDistribution>,
    pub steered: Vec<NextTokenDistribution>,
}

impl DistributionTracePair {
    pub fn divergence(&self) -> Result<PositionDivergence> {
        if self.baseline.len() != self.steered.len() {
            return Err(PlanError::Metric(format!(
                "trace lengths differ: {} vs {}",
                self.baseline.len(),
                self.steered.len()
            )));
        }
        let mut out = PositionDivergence::default();
        for (b, s) in self.baseline.iter().zip(&self.steered) {
            out.kl.push(kl_divergence(b, s)?);
            out.top1_differs.push(b.argmax() != s.argmax());
        }
        Ok(out)
    }
}

/// Teacher-forces a baseline record with and without steering. Entry `j`
/// of each side is the distribution that predicts the `j`-th token of the
/// generated second line.
pub fn trace_pair(
    model: &Model,
    vocab: &Vocabulary,
    record: &GenerationRecord,
    steering: &SteeringVector,
) -> Result<DistributionTracePair> {
    let tokens = record.full_tokens();
    let span = second_line_span(vocab, &tokens, record.prompt_tokens.len())?;
    let anchors = locate_anchors(vocab, &record.prompt_tokens)?;
    let plan = steering_plan(steering, &anchors, steering.anchor_kind)?;
    // The last span token's prediction only needs the tokens before it.
    let forced = &tokens[..span.end - 1];
    let window = span.start - 1..span.end - 1;
    let baseline = model.teacher_forced_distributions(forced, None)?;
    let steered = model.teacher_forced_distributions(forced, Some(&plan))?;
    Ok(DistributionTracePair {
        baseline: baseline[window.clone()].to_vec(),
        steered: steered[window].to_vec(),
    })
}

/// Per-position KL and top-1 disagreement for one record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionDivergence {
    pub kl: Vec<f64>,
    pub top1_differs: Vec<bool>,
}

impl PositionDivergence {
    pub fn len(&self) -> usize {
        self.kl.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kl.is_empty()
    }

    fn hits(&self, criterion: Criterion) -> Vec<bool> {
        match criterion {
            Criterion::Top1Diff => self.top1_differs.clone(),
            Criterion::HighKl => self.kl.iter().map(|&k| k > HIGH_KL_THRESHOLD).collect(),
            Criterion::KlAbove(t) => self.kl.iter().map(|&k| k > t).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Top1Diff,
    HighKl,
    /// KL strictly above a custom threshold.
    KlAbove(f64),
}

fn per_record<F>(records: &[PositionDivergence], f: F) -> Result<f64>
where
    F: Fn(&PositionDivergence) -> f64,
{
    if records.is_empty() {
        return Err(PlanError::Metric("no trace records".into()));
    }
    let mut sum = 0.0;
    for (i, r) in records.iter().enumerate() {
        if r.is_empty() || r.kl.len() != r.top1_differs.len() {
            return Err(PlanError::Metric(format!("record {i} has an empty or ragged span")));
        }
        sum += f(r);
    }
    Ok(sum / records.len() as f64)
}

fn fraction_meeting(records: &[PositionDivergence], criterion: Criterion) -> Result<f64> {
    per_record(records, |r| {
        let h = r.hits(criterion);
        h.iter().filter(|&&x| x).count() as f64 / h.len() as f64
    })
}

/// Mean over records of the share of span positions with KL > 1 nat.
pub fn fraction_high_kl(records: &[PositionDivergence]) -> Result<f64> {
    fraction_meeting(records, Criterion::HighKl)
}

/// Mean over records of the share of span positions whose top-1 tokens
/// differ.
pub fn fraction_top1_difference(records: &[PositionDivergence]) -> Result<f64> {
    fraction_meeting(records, Criterion::Top1Diff)
}

/// Mean over records of `(len - first) / len`, where `first` is the first
/// span position meeting `criterion`. Records with no such position add 0.
pub fn tokens_after_first(records: &[PositionDivergence], criterion: Criterion) -> Result<f64> {
    per_record(records, |r| {
        let h = r.hits(criterion);
        match h.iter().position(|&x| x) {
            Some(first) => (h.len() - first) as f64 / h.len() as f64,
            None => 0.0,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(p: &[f64]) -> NextTokenDistribution {
        NextTokenDistribution { probs: p.to_vec() }
    }

    fn rec(kl: &[f64], top1: &[bool]) -> PositionDivergence {
        PositionDivergence {
            kl: kl.to_vec(),
            top1_differs: top1.to_vec(),
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&d(&[0.2, 0.8]), &d(&[0.2, 0.8])).unwrap(), 0.0);
        let direct = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&d(&[0.5, 0.5]), &d(&[0.9, 0.1])).unwrap() - direct).abs() < 1e-15);
        assert_eq!(kl_divergence(&d(&[0.0, 1.0]), &d(&[0.5, 0.5])).unwrap(), 2f64.ln());
        assert!(kl_divergence(&d(&[1.0]), &d(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn counts() {
        let r = [rec(&[0.2, 1.5, 3.0, 0.9], &[true, true, false, false])];
        assert_eq!(fraction_high_kl(&r).unwrap(), 0.5);
        assert_eq!(fraction_top1_difference(&r).unwrap(), 0.5);
        // Exactly 1 nat is not "high".
        assert_eq!(fraction_high_kl(&[rec(&[1.0], &[false])]).unwrap(), 0.0);
        assert_eq!(tokens_after_first(&r, Criterion::HighKl).unwrap(), 0.75);
        assert_eq!(tokens_after_first(&r, Criterion::Top1Diff).unwrap(), 1.0);
        let mut ten = vec![false; 10];
        ten[7] = true;
        let r10 = [rec(&[0.0; 10], &ten)];
        assert!((tokens_after_first(&r10, Criterion::Top1Diff).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(tokens_after_first(&r10, Criterion::HighKl).unwrap(), 0.0);
    }

    #[test]
    fn double_average() {
        let r = [
            rec(&[2.0, 0.0], &[true, false]),
            rec(&[2.0, 2.0, 2.0, 0.0], &[false; 4]),
        ];
        assert_eq!(fraction_high_kl(&r).unwrap(), (0.5 + 0.75) / 2.0);
        assert!(fraction_high_kl(&[]).is_err());
        assert!(fraction_high_kl(&[rec(&[], &[])]).is_err());
    }

    #[test]
    fn trace_pair_divergence() {
        let same = DistributionTracePair {
            baseline: vec![d(&[0.3, 0.7]), d(&[0.6, 0.4])],
            steered: vec![d(&[0.3, 0.7]), d(&[0.6, 0.4])],
        };
        let div = same.divergence().unwrap();
        assert_eq!(fraction_high_kl(std::slice::from_ref(&div)).unwrap(), 0.0);
        assert_eq!(fraction_top1_difference(&[div]).unwrap(), 0.0);
        let flipped = DistributionTracePair {
            baseline: vec![d(&[0.45, 0.55])],
            steered: vec![d(&[0.55, 0.45])],
        };
        let div = flipped.divergence().unwrap();
        assert!(div.kl[0] < 1.0);
        assert!(div.top1_differs[0]);
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_nonnegative((p, q) in (2usize..12).prop_flat_map(|n| (dist(n), dist(n)))) {
            let k = kl_slices(&p, &q).unwrap();
            prop_assert!(k >= 0.0);
            prop_assert!(kl_slices(&p, &p).unwrap() < 1e-12);
        }

        #[test]
        fn relaxing_threshold_never_lowers(kl in prop::collection::vec(0.0f64..4.0, 1..20), t in 0.0f64..3.0, dt in 0.0f64..1.0) {
            let r = [PositionDivergence { top1_differs: vec![false; kl.len()], kl }];
            let strict = tokens_after_first(&r, Criterion::KlAbove(t + dt)).unwrap();
            let loose = tokens_after_first(&r, Criterion::KlAbove(t)).unwrap();
            prop_assert!(loose >= strict);
            prop_assert!((0.0..=1.0).contains(&loose));
        }
    }
}
