// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference forward pass: dense f64 loops over named tensors, no caching.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{PlanError, Result};
use crate::intervene::{Intervention, InterventionPlan};
use crate::runtime::{Activation, ModelSpec, NormScheme, PositionalScheme, WeightStore};

fn tensor(w: &WeightStore, name: &str) -> Result<Vec<f64>> {
    let t = w.try_get(name).ok_or_else(|| PlanError::Tensor {
        name: name.to_string(),
        msg: "missing".into(),
    })?;
    Ok(t.data.iter().map(|&v| v as f64).collect())
}

/// `w` is `[rows, cols]`.
fn apply(w: &[f64], b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    let rows = w.len() / cols;
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut s = 0.0;
        for c in 0..cols {
            s += w[r * cols + c] * x[c];
        }
        if let Some(b) = b {
            s += b[r];
        }
        out[r] = s;
    }
    out
}

fn normalize(scheme: NormScheme, x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let eps = 1e-5;
    let mean = match scheme {
        NormScheme::PreLayernorm => x.iter().sum::<f64>() / n,
        NormScheme::PreRmsnorm => 0.0,
    };
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = 1.0 / (var + eps).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * scale * g[i] + b[i]).collect()
}

fn nonlinearity(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
        }
        Activation::Silu => x / (1.0 + (-x).exp()),
    }
}

fn rotate(v: &mut [f64], pos: usize) {
    let hd = v.len();
    let half = hd / 2;
    for i in 0..half {
        let theta = pos as f64 / 10_000f64.powf(2.0 * i as f64 / hd as f64);
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * theta.cos() - b * theta.sin();
        v[i + half] = a * theta.sin() + b * theta.cos();
    }
}

struct Hooks {
    adds: BTreeMap<(usize, usize), Vec<f64>>,
    patches: BTreeMap<(usize, usize, usize), Vec<f64>>,
    blocked: BTreeSet<usize>,
    layers: Option<BTreeSet<usize>>,
}

impl Hooks {
    fn new(spec: &ModelSpec, plan: Option<&InterventionPlan>, len: usize) -> Result<Self> {
        let mut h = Hooks {
            adds: BTreeMap::new(),
            patches: BTreeMap::new(),
            blocked: BTreeSet::new(),
            layers: None,
        };
        let Some(plan) = plan else { return Ok(h) };
        let range = |what: String| Err(PlanError::InterventionRange(what));
        let mut every_layer = false;
        let mut some_layers = BTreeSet::new();
        for item in plan.iter() {
            match item {
                Intervention::ResidualAdd {
                    layer,
                    position,
                    vector,
                    multiplier,
                } => {
                    if *layer >= spec.layer_count || *position >= len || vector.len() != spec.model_dim {
                        return range(format!("residual add at ({layer}, {position})"));
                    }
                    let v = vector.iter().map(|&x| f64::from(*multiplier) * f64::from(x)).collect();
                    h.adds.insert((*layer, *position), v);
                }
                Intervention::HeadOutputPatch {
                    layer,
                    head,
                    position,
                    replacement,
                } => {
                    if *layer >= spec.layer_count
                        || *head >= spec.head_count
                        || *position >= len
                        || replacement.len() != spec.head_dim
                    {
                        return range(format!("head patch at ({layer}, {head}, {position})"));
                    }
                    h.patches.insert(
                        (*layer, *head, *position),
                        replacement.iter().map(|&x| x as f64).collect(),
                    );
                }
                Intervention::AttentionAblation {
                    blocked_key_positions,
                    layers,
                } => {
                    if blocked_key_positions.iter().any(|&p| p >= len) {
                        return range("ablated key outside sequence".into());
                    }
                    h.blocked.extend(blocked_key_positions);
                    match layers {
                        None => every_layer = true,
                        Some(ls) => {
                            if ls.iter().any(|&l| l >= spec.layer_count) {
                                return range("ablation layer out of range".into());
                            }
                            some_layers.extend(ls);
                        }
                    }
                }
            }
        }
        if !h.blocked.is_empty() && !every_layer {
            h.layers = Some(some_layers);
        }
        Ok(h)
    }

    fn masks(&self, layer: usize, key: usize) -> bool {
        self.blocked.contains(&key) && self.layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }
}

/// Logits for every position of `tokens`, computed independently of the
/// runtime.
pub fn brute_force_logits(
    spec: &ModelSpec,
    weights: &WeightStore,
    tokens: &[u32],
    plan: Option<&InterventionPlan>,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if tokens.is_empty() {
        return Err(PlanError::InvalidPlan("empty token sequence".into()));
    }
    if tokens.len() > spec.max_context {
        return Err(PlanError::SequenceTooLong {
            len: tokens.len(),
            max: spec.max_context,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(PlanError::UnknownToken {
            id: bad,
            vocab: spec.vocab_size,
        });
    }
    let hooks = Hooks::new(spec, plan, tokens.len())?;
    let d = spec.model_dim;
    let hd = spec.head_dim;
    let n = tokens.len();

    let emb = tensor(weights, "tok_embed")?;
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| emb[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect();
    if spec.positional_scheme == PositionalScheme::Learned {
        let pe = tensor(weights, "pos_embed")?;
        for (p, row) in x.iter_mut().enumerate() {
            for i in 0..d {
                row[i] += pe[p * d + i];
            }
        }
    }

    for l in 0..spec.layer_count {
        let t = |s: &str| tensor(weights, &format!("layers.{l}.{s}"));
        let (g1, b1) = (t("norm1.weight")?, t("norm1.bias")?);
        let (wq, bq, wk, bk) = (
            t("attn.q.weight")?,
            t("attn.q.bias")?,
            t("attn.k.weight")?,
            t("attn.k.bias")?,
        );
        let (wv, bv, wo, bo) = (
            t("attn.v.weight")?,
            t("attn.v.bias")?,
            t("attn.o.weight")?,
            t("attn.o.bias")?,
        );
        let (g2, b2) = (t("norm2.weight")?, t("norm2.bias")?);
        let (wu, bu, wd, bd) = (
            t("mlp.up.weight")?,
            t("mlp.up.bias")?,
            t("mlp.down.weight")?,
            t("mlp.down.bias")?,
        );

        let mut qs = Vec::with_capacity(n);
        let mut ks = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for (p, row) in x.iter().enumerate() {
            let h = normalize(spec.norm_scheme, row, &g1, &b1);
            let mut q = apply(&wq, Some(&bq), &h);
            let mut k = apply(&wk, Some(&bk), &h);
            if spec.positional_scheme == PositionalScheme::Rotary {
                for head in 0..spec.head_count {
                    rotate(&mut q[head * hd..(head + 1) * hd], p);
                    rotate(&mut k[head * hd..(head + 1) * hd], p);
                }
            }
            qs.push(q);
            ks.push(k);
            vs.push(apply(&wv, Some(&bv), &h));
        }

        for p in 0..n {
            let mut heads = vec![0.0; d];
            for head in 0..spec.head_count {
                let lo = head * hd;
                let out = if let Some(r) = hooks.patches.get(&(l, head, p)) {
                    r.clone()
                } else {
                    let visible: Vec<usize> = (0..=p).filter(|&j| !hooks.masks(l, j)).collect();
                    if visible.is_empty() {
                        return Err(PlanError::InvalidPlan(format!("query {p} has no visible keys")));
                    }
                    let scores: Vec<f64> = visible
                        .iter()
                        .map(|&j| (0..hd).map(|i| qs[p][lo + i] * ks[j][lo + i]).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let mut out = vec![0.0; hd];
                    for (w, &j) in e.iter().zip(&visible) {
                        for i in 0..hd {
                            out[i] += w / z * vs[j][lo + i];
                        }
                    }
                    out
                };
                heads[lo..lo + hd].copy_from_slice(&out);
            }
            let attn = apply(&wo, Some(&bo), &heads);
            for i in 0..d {
                x[p][i] += attn[i];
            }
            let h = normalize(spec.norm_scheme, &x[p], &g2, &b2);
            let hidden: Vec<f64> = apply(&wu, Some(&bu), &h)
                .into_iter()
                .map(|v| nonlinearity(spec.activation, v))
                .collect();
            let mlp = apply(&wd, Some(&bd), &hidden);
            for i in 0..d {
                x[p][i] += mlp[i];
            }
            if let Some(v) = hooks.adds.get(&(l, p)) {
                for i in 0..d {
                    x[p][i] += v[i];
                }
            }
        }
    }

    let (gf, bf) = (
        tensor(weights, "final_norm.weight")?,
        tensor(weights, "final_norm.bias")?,
    );
    let un = tensor(weights, if spec.tied_embeddings { "tok_embed" } else { "unembed" })?;
    Ok(x.iter()
        .map(|row| apply(&un, None, &normalize(spec.norm_scheme, row, &gf, &bf)))
        .collect())
}

/// `max |a - b| / max(max |b|, 1)` over all positions.
pub fn relative_error(runtime: &[Vec<f32>], oracle: &[Vec<f64>]) -> Result<f64> {
    if runtime.len() != oracle.len() || runtime.iter().zip(oracle).any(|(a, b)| a.len() != b.len()) {
        return Err(PlanError::Planted("logit shapes differ".into()));
    }
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for (a, b) in runtime.iter().zip(oracle) {
        for (&x, &y) in a.iter().zip(b) {
            diff = diff.max((x as f64 - y).abs());
            scale = scale.max(y.abs());
        }
    }
    Ok(diff / scale)
}
