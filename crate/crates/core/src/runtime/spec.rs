// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model hyper-parameters and the canonical tensor naming scheme.

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};

/// How token positions are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalScheme {
    /// Learned absolute position table (`pos_embed`).
    Learned,
    /// Rotary embeddings on queries and keys, base 10000, half-split pairing.
    Rotary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScheme {
    PreLayernorm,
    PreRmsnorm,
}

/// MLP nonlinearity. `Gelu` is the tanh approximation used by GPT-2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Silu,
}

/// Shape of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_count: usize,
    pub head_count: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub positional_scheme: PositionalScheme,
    pub norm_scheme: NormScheme,
    pub activation: Activation,
    pub tied_embeddings: bool,
}

/// Epsilon used by both norm schemes.
pub const NORM_EPS: f64 = 1e-5;

/// Rotary frequency base.
pub const ROTARY_BASE: f64 = 10_000.0;

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layer_count", self.layer_count),
            ("head_count", self.head_count),
            ("model_dim", self.model_dim),
            ("head_dim", self.head_dim),
            ("mlp_dim", self.mlp_dim),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(PlanError::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        if self.head_count * self.head_dim != self.model_dim {
            return Err(PlanError::InvalidSpec(format!(
                "head_count ({}) x head_dim ({}) != model_dim ({})",
                self.head_count, self.head_dim, self.model_dim
            )));
        }
        if self.positional_scheme == PositionalScheme::Rotary && !self.head_dim.is_multiple_of(2) {
            return Err(PlanError::InvalidSpec("rotary positions need an even head_dim".into()));
        }
        Ok(())
    }

    /// Every tensor the runtime expects, with its row-major shape.
    ///
    /// Linear weights are stored `[out, in]`.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.model_dim;
        let mut out = vec![("tok_embed".to_string(), vec![self.vocab_size, d])];
        if self.positional_scheme == PositionalScheme::Learned {
            out.push(("pos_embed".to_string(), vec![self.max_context, d]));
        }
        for l in 0..self.layer_count {
            let names = LayerNames::new(l);
            out.push((names.norm1_w, vec![d]));
            out.push((names.norm1_b, vec![d]));
            for (w, b) in [
                (names.q_w, names.q_b),
                (names.k_w, names.k_b),
                (names.v_w, names.v_b),
                (names.o_w, names.o_b),
            ] {
                out.push((w, vec![d, d]));
                out.push((b, vec![d]));
            }
            out.push((names.norm2_w, vec![d]));
            out.push((names.norm2_b, vec![d]));
            out.push((names.up_w, vec![self.mlp_dim, d]));
            out.push((names.up_b, vec![self.mlp_dim]));
            out.push((names.down_w, vec![d, self.mlp_dim]));
            out.push((names.down_b, vec![d]));
        }
        out.push(("final_norm.weight".to_string(), vec![d]));
        out.push(("final_norm.bias".to_string(), vec![d]));
        if !self.tied_embeddings {
            out.push(("unembed".to_string(), vec![self.vocab_size, d]));
        }
        out
    }

    /// Name of the output projection matrix (`tok_embed` when tied).
    pub fn unembed_name(&self) -> &'static str {
        if self.tied_embeddings {
            "tok_embed"
        } else {
            "unembed"
        }
    }
}

/// Canonical tensor names for one transformer block.
#[derive(Debug, Clone)]
pub struct LayerNames {
    pub norm1_w: String,
    pub norm1_b: String,
    pub q_w: String,
    pub q_b: String,
    pub k_w: String,
    pub k_b: String,
    pub v_w: String,
    pub v_b: String,
    pub o_w: String,
    pub o_b: String,
    pub norm2_w: String,
    pub norm2_b: String,
    pub up_w: String,
    pub up_b: String,
    pub down_w: String,
    pub down_b: String,
}

impl LayerNames {
    pub fn new(layer: usize) -> Self {
        let p = format!("layers.{layer}");
        Self {
            norm1_w: format!("{p}.norm1.weight"),
            norm1_b: format!("{p}.norm1.bias"),
            q_w: format!("{p}.attn.q.weight"),
            q_b: format!("{p}.attn.q.bias"),
            k_w: format!("{p}.attn.k.weight"),
            k_b: format!("{p}.attn.k.bias"),
            v_w: format!("{p}.attn.v.weight"),
            v_b: format!("{p}.attn.v.bias"),
            o_w: format!("{p}.attn.o.weight"),
            o_b: format!("{p}.attn.o.bias"),
            norm2_w: format!("{p}.norm2.weight"),
            norm2_b: format!("{p}.norm2.bias"),
            up_w: format!("{p}.mlp.up.weight"),
            up_b: format!("{p}.mlp.up.bias"),
            down_w: format!("{p}.mlp.down.weight"),
            down_b: format!("{p}.mlp.down.bias"),
        }
    }
}
