// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameters and ground truth of a planted planning model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::text::{AnchorKind, Vocabulary};

/// One of the two categories a planted model chooses between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSide {
    /// Dataset category id.
    pub category: String,
    /// Tokens emitted as the category word.
    pub category_tokens: Vec<String>,
    /// Intermediate token emitted before the category word.
    pub marker: String,
    /// Prompt tokens that select this side.
    pub cue_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub a: PlantedSide,
    pub b: PlantedSide,
    /// Tokens that can hold the plan (the cue line's terminal delimiter).
    pub delimiter_tokens: Vec<String>,
    /// Tokens after which a marker is generated.
    pub marker_slot_tokens: Vec<String>,
    /// Token emitted after the category word.
    pub line_end: String,
    /// Head that copies the plan forward. Must sit in the last layer.
    pub copy_head: (usize, usize),
    /// Marker logit gap `g` between the planned and the other side.
    pub logit_gap: f64,
    /// Category logit shift each side gets from a matching marker.
    pub marker_coupling: f64,
    /// Std of the random perturbation added to every weight.
    pub noise: f64,
    pub seed: u64,
    pub model_dim: usize,
    pub head_count: usize,
    pub mlp_dim: usize,
    pub max_context: usize,
}

impl PlantedSpec {
    /// Spec with the default architecture and constants for two sides.
    pub fn new(a: PlantedSide, b: PlantedSide, delimiter: &str, marker_slot: &str) -> Self {
        Self {
            a,
            b,
            delimiter_tokens: vec![delimiter.to_string()],
            marker_slot_tokens: vec![marker_slot.to_string()],
            line_end: "\n".to_string(),
            copy_head: (1, 2),
            logit_gap: 8.0,
            marker_coupling: 2.0,
            noise: 0.002,
            seed: 0x5eed,
            model_dim: 32,
            head_count: 4,
            mlp_dim: 64,
            max_context: 256,
        }
    }

    pub fn sides(&self) -> [&PlantedSide; 2] {
        [&self.a, &self.b]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PlanError::Planted(m));
        if self.a.category_tokens.len() != self.b.category_tokens.len() || self.a.category_tokens.is_empty() {
            return bad("both sides need the same, non-zero number of category tokens".into());
        }
        if self.a.cue_tokens.is_empty() || self.b.cue_tokens.is_empty() {
            return bad("each side needs at least one cue token".into());
        }
        if self.delimiter_tokens.is_empty() || self.marker_slot_tokens.is_empty() {
            return bad("delimiter and marker-slot token lists must be non-empty".into());
        }
        if self.logit_gap < 4.0 {
            return bad(format!("logit gap {} is below 4", self.logit_gap));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || self.marker_coupling < 0.0 {
            return bad("noise and marker coupling must be non-negative".into());
        }
        if self.copy_head.0 != 1 || self.copy_head.1 >= self.head_count {
            return bad(format!("copy head {:?} must be a head of layer 1", self.copy_head));
        }
        if self.head_count < 2 || !self.model_dim.is_multiple_of(self.head_count) {
            return bad("model_dim must split into at least two heads".into());
        }
        if self.model_dim < super::build::MIN_MODEL_DIM || self.model_dim / self.head_count < 2 || self.mlp_dim < 3 {
            return bad(format!(
                "model_dim {} / mlp_dim {} too small to embed the construction",
                self.model_dim, self.mlp_dim
            ));
        }
        // Every role token must be distinct from every other role.
        let mut role: BTreeMap<&str, &str> = BTreeMap::new();
        let groups: [(&str, Vec<&String>); 4] = [
            (
                "category",
                self.a.category_tokens.iter().chain(&self.b.category_tokens).collect(),
            ),
            ("marker", vec![&self.a.marker, &self.b.marker]),
            ("cue", self.a.cue_tokens.iter().chain(&self.b.cue_tokens).collect()),
            ("line end", vec![&self.line_end]),
        ];
        for (name, tokens) in &groups {
            for t in tokens {
                if let Some(prev) = role.insert(t.as_str(), name) {
                    return bad(format!("token {t:?} is both a {prev} and a {name} token"));
                }
            }
        }
        for t in self.delimiter_tokens.iter().chain(&self.marker_slot_tokens) {
            if let Some(r) = role.get(t.as_str()) {
                if t != &self.line_end {
                    return bad(format!("delimiter/marker-slot token {t:?} is also a {r} token"));
                }
            }
        }
        Ok(())
    }

    /// Token ids for every role, checked against `vocab`.
    pub fn resolve(&self, vocab: &Vocabulary) -> Result<ResolvedTokens> {
        let id = |s: &String| {
            vocab
                .id_of_text(s)
                .ok_or_else(|| PlanError::Planted(format!("{s:?} is not a single vocabulary token")))
        };
        let ids = |v: &[String]| v.iter().map(id).collect::<Result<Vec<u32>>>();
        Ok(ResolvedTokens {
            categories: [ids(&self.a.category_tokens)?, ids(&self.b.category_tokens)?],
            markers: [id(&self.a.marker)?, id(&self.b.marker)?],
            cues: [ids(&self.a.cue_tokens)?, ids(&self.b.cue_tokens)?],
            delimiters: ids(&self.delimiter_tokens)?,
            marker_slots: ids(&self.marker_slot_tokens)?,
            line_end: id(&self.line_end)?,
        })
    }
}

/// Token ids of a [`PlantedSpec`]; index 0 is side A, 1 is side B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedTokens {
    pub categories: [Vec<u32>; 2],
    pub markers: [u32; 2],
    pub cues: [Vec<u32>; 2],
    pub delimiters: Vec<u32>,
    pub marker_slots: Vec<u32>,
    pub line_end: u32,
}

impl ResolvedTokens {
    /// Side of the last cue token in `tokens`.
    pub fn cued_side(&self, tokens: &[u32]) -> Option<usize> {
        tokens
            .iter()
            .rev()
            .find_map(|t| (0..2).find(|&s| self.cues[s].contains(t)))
    }

    pub fn side_of_category(&self, token: u32) -> Option<usize> {
        (0..2).find(|&s| self.categories[s].contains(&token))
    }

    pub fn side_of_marker(&self, token: u32) -> Option<usize> {
        (0..2).find(|&s| self.markers[s] == token)
    }
}

/// What a planted model is built to do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub categories: [String; 2],
    pub tokens: ResolvedTokens,
    /// Unit residual direction carrying the plan (+ for side A).
    pub plan_direction: Vec<f32>,
    /// Nominal plan magnitude at the delimiter after layer `plan_layer`.
    pub plan_magnitude: f64,
    pub plan_layer: usize,
    pub plan_anchor: AnchorKind,
    /// The only head that moves the plan to later positions.
    pub copy_head: (usize, usize),
    pub logit_gap: f64,
    pub marker_coupling: f64,
}

impl GroundTruth {
    /// Category the prompt's cue selects, if it has one.
    pub fn expected_category(&self, tokens: &[u32]) -> Option<&str> {
        self.tokens.cued_side(tokens).map(|s| self.categories[s].as_str())
    }

    pub fn side_of(&self, category: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| PlanError::Planted(format!("`{category}` is not a planted category")))
    }

    /// Steering vector mean-difference estimation should recover for
    /// `source -> target`.
    pub fn expected_vector(&self, source: &str, target: &str) -> Result<Vec<f32>> {
        let (s, t) = (self.side_of(source)?, self.side_of(target)?);
        let sign = match (s, t) {
            (0, 1) => -1.0,
            (1, 0) => 1.0,
            _ => return Err(PlanError::Planted("source and target must differ".into())),
        };
        let k = (2.0 * self.plan_magnitude * sign) as f32;
        Ok(self.plan_direction.iter().map(|d| d * k).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
