// SPDX-License-Identifier: MIT OR Apache-2.0

//! Metric records and Pearson correlations between metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};

/// One metric value and the run it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub experiment: String,
    pub model: String,
    /// Category, pair or prompt id.
    pub group: String,
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    pub config_hash: String,
}

/// Metrics whose values are not fractions.
const UNBOUNDED_SUFFIXES: [&str; 3] = ["correlation", "logit_difference", "recovery_percent"];

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(PlanError::Report(format!("`{}` has no samples", self.metric)));
        }
        if !self.value.is_finite() {
            return Err(PlanError::Report(format!("`{}` is not finite", self.metric)));
        }
        let bounded = !UNBOUNDED_SUFFIXES.iter().any(|s| self.metric.ends_with(s));
        if bounded && !(0.0..=1.0).contains(&self.value) {
            return Err(PlanError::Report(format!(
                "fraction `{}` = {} outside [0, 1]",
                self.metric, self.value
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One observation per (model, group).
    PerPrompt,
    /// One observation per model; values averaged over groups.
    PerModel,
}

pub const MIN_OBSERVATIONS: usize = 3;

/// Symmetric correlation matrix. `None` marks an undefined cell (fewer than
/// three aligned observations, or a zero-variance metric).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub metrics: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
    pub observations: Vec<Vec<usize>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.metrics.iter().position(|m| m == a)?;
        let j = self.metrics.iter().position(|m| m == b)?;
        self.cells[i][j]
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn correlation_report(reports: &[MetricReport], grouping: Grouping) -> Result<CorrelationMatrix> {
    // metric -> observation key -> (sum, count)
    let mut table: BTreeMap<&str, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for r in reports {
        let key = match grouping {
            Grouping::PerPrompt => format!("{}\u{1f}{}", r.model, r.group),
            Grouping::PerModel => r.model.clone(),
        };
        let e = table.entry(&r.metric).or_default().entry(key).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    let keys: BTreeSet<&String> = table.values().flat_map(|m| m.keys()).collect();
    if table.is_empty() || keys.len() < MIN_OBSERVATIONS {
        return Err(PlanError::Metric(format!(
            "correlations need at least {MIN_OBSERVATIONS} observations, got {}",
            keys.len()
        )));
    }
    let metrics: Vec<String> = table.keys().map(|m| m.to_string()).collect();
    let k = metrics.len();
    let mut cells = vec![vec![None; k]; k];
    let mut observations = vec![vec![0; k]; k];
    let cols: Vec<&BTreeMap<String, (f64, usize)>> = table.values().collect();
    for i in 0..k {
        for j in i..k {
            let (mut x, mut y) = (Vec::new(), Vec::new());
            for (key, &(s, c)) in cols[i] {
                if let Some(&(s2, c2)) = cols[j].get(key) {
                    x.push(s / c as f64);
                    y.push(s2 / c2 as f64);
                }
            }
            let r = if x.len() < MIN_OBSERVATIONS {
                None
            } else if i == j {
                pearson(&x, &y).map(|_| 1.0)
            } else {
                pearson(&x, &y)
            };
            cells[i][j] = r;
            cells[j][i] = r;
            observations[i][j] = x.len();
            observations[j][i] = x.len();
        }
    }
    Ok(CorrelationMatrix {
        metrics,
        cells,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn report(metric: &str, group: usize, value: f64) -> MetricReport {
        MetricReport {
            experiment: "e".into(),
            model: "m".into(),
            group: format!("g{group}"),
            metric: metric.into(),
            value,
            samples: 1,
            config_hash: "h".into(),
        }
    }

    #[test]
    fn self_and_negation() {
        let mut rs = Vec::new();
        for g in 0..6 {
            let v = (g as f64 * 0.37).sin();
            rs.push(report("x", g, v));
            rs.push(report("neg_x", g, -v));
            rs.push(report("flat", g, 0.5));
        }
        let m = correlation_report(&rs, Grouping::PerPrompt).unwrap();
        assert_eq!(m.get("x", "x"), Some(1.0));
        assert!((m.get("x", "neg_x").unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(m.get("x", "flat"), None);
        assert_eq!(m.get("flat", "flat"), None);
        for i in 0..m.metrics.len() {
            for j in 0..m.metrics.len() {
                assert_eq!(m.cells[i][j], m.cells[j][i]);
            }
        }
        assert!(correlation_report(&rs, Grouping::PerModel).is_err());
        assert!(correlation_report(&[], Grouping::PerPrompt).is_err());
    }

    #[test]
    fn independent_columns_are_weakly_correlated() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rs: Vec<MetricReport> = (0..100)
            .flat_map(|g| [report("a", g, rng.gen()), report("b", g, rng.gen())])
            .collect();
        let r = correlation_report(&rs, Grouping::PerPrompt)
            .unwrap()
            .get("a", "b")
            .unwrap();
        assert!(r.abs() < 0.35, "r = {r}");
    }

    #[test]
    fn report_validation() {
        assert!(report("fraction_correct", 0, 0.5).validate().is_ok());
        assert!(report("fraction_correct", 0, 1.5).validate().is_err());
        assert!(report("patch_recovery_percent", 0, 93.0).validate().is_ok());
        let mut r = report("x", 0, 0.1);
        r.samples = 0;
        assert!(r.validate().is_err());
    }
}
