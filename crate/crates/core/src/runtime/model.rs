// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass over a [`WeightStore`].
//!
//! Two code paths share the row kernels: [`Model::forward`] runs layer by
//! layer over the whole sequence, and [`Session`] runs token by token with a
//! key/value cache. Both produce bit-identical logits.
//!
//! "Layer `l` activation" is the residual stream leaving block `l` (after its
//! MLP residual add), i.e. the input to block `l + 1`. Residual additions are
//! applied there, and captured values include them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{PlanError, Result};
use crate::intervene::{Intervention, InterventionPlan};
use crate::runtime::kernels::{activate, matvec, norm, rotary, softmax};
use crate::runtime::spec::{LayerNames, ModelSpec, PositionalScheme};
use crate::runtime::weights::WeightStore;

/// Residual activations keyed by (layer, position).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualTrace {
    pub entries: BTreeMap<(usize, usize), Vec<f32>>,
}

impl ResidualTrace {
    pub fn get(&self, layer: usize, position: usize) -> Option<&[f32]> {
        self.entries.get(&(layer, position)).map(Vec::as_slice)
    }
}

/// Attention weights keyed by (layer, head, query) and head outputs keyed by
/// (layer, head, position).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    /// Weights over key positions `0..=query`.
    pub weights: BTreeMap<(usize, usize, usize), Vec<f32>>,
    /// Per-head output before the output projection.
    pub head_outputs: BTreeMap<(usize, usize, usize), Vec<f32>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum ResidualCapture {
    #[default]
    None,
    All,
    Sites(BTreeSet<(usize, usize)>),
}

impl ResidualCapture {
    fn wants(&self, layer: usize, position: usize) -> bool {
        match self {
            Self::None => false,
            Self::All => true,
            Self::Sites(s) => s.contains(&(layer, position)),
        }
    }
}

/// What a forward pass should record besides logits.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Capture {
    pub residual: ResidualCapture,
    pub attention_weights: bool,
    pub head_outputs: bool,
}

impl Capture {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            residual: ResidualCapture::All,
            attention_weights: true,
            head_outputs: true,
        }
    }

    pub fn residual_at(layer: usize, position: usize) -> Self {
        Self {
            residual: ResidualCapture::Sites([(layer, position)].into()),
            ..Self::default()
        }
    }

    pub fn head_outputs() -> Self {
        Self {
            head_outputs: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One row of `vocab_size` logits per input position.
    pub logits: Vec<Vec<f32>>,
    pub residual: ResidualTrace,
    pub attention: AttentionTrace,
}

/// Next-token probabilities (computed in f64).
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution {
    pub probs: Vec<f64>,
}

impl NextTokenDistribution {
    pub fn from_logits(logits: &[f32]) -> Self {
        Self { probs: softmax(logits) }
    }

    /// Highest-probability token, lowest id on ties.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as u32
    }

    pub fn mass(&self, tokens: impl IntoIterator<Item = u32>) -> f64 {
        tokens.into_iter().map(|t| self.probs[t as usize]).sum()
    }
}

/// Plan lowered to lookup tables for the forward pass.
#[derive(Debug, Default)]
struct CompiledPlan {
    adds: HashMap<(usize, usize), (Vec<f32>, f32)>,
    patches: HashMap<(usize, usize, usize), Vec<f32>>,
    blocked: BTreeSet<usize>,
    /// `None` = every layer.
    ablation_layers: Option<BTreeSet<usize>>,
}

impl CompiledPlan {
    fn compile(spec: &ModelSpec, plan: Option<&InterventionPlan>, position_limit: usize) -> Result<Self> {
        let mut out = Self::default();
        let Some(plan) = plan else { return Ok(out) };
        let check_layer = |l: usize| {
            if l >= spec.layer_count {
                Err(PlanError::InterventionRange(format!(
                    "layer {l} >= layer_count {}",
                    spec.layer_count
                )))
            } else {
                Ok(())
            }
        };
        let check_pos = |p: usize| {
            if p >= position_limit {
                Err(PlanError::InterventionRange(format!(
                    "position {p} outside sequence (limit {position_limit})"
                )))
            } else {
                Ok(())
            }
        };
        let mut any_ablation = false;
        let mut all_layers = false;
        let mut layer_union = BTreeSet::new();
        for item in plan.iter() {
            match item {
                Intervention::ResidualAdd {
                    layer,
                    position,
                    vector,
                    multiplier,
                } => {
                    check_layer(*layer)?;
                    check_pos(*position)?;
                    if vector.len() != spec.model_dim {
                        return Err(PlanError::InterventionRange(format!(
                            "residual vector has {} entries, model_dim is {}",
                            vector.len(),
                            spec.model_dim
                        )));
                    }
                    out.adds.insert((*layer, *position), (vector.clone(), *multiplier));
                }
                Intervention::HeadOutputPatch {
                    layer,
                    head,
                    position,
                    replacement,
                } => {
                    check_layer(*layer)?;
                    check_pos(*position)?;
                    if *head >= spec.head_count {
                        return Err(PlanError::InterventionRange(format!(
                            "head {head} >= head_count {}",
                            spec.head_count
                        )));
                    }
                    if replacement.len() != spec.head_dim {
                        return Err(PlanError::InterventionRange(format!(
                            "patch has {} entries, head_dim is {}",
                            replacement.len(),
                            spec.head_dim
                        )));
                    }
                    out.patches.insert((*layer, *head, *position), replacement.clone());
                }
                Intervention::AttentionAblation {
                    blocked_key_positions,
                    layers,
                } => {
                    any_ablation = true;
                    for &p in blocked_key_positions {
                        check_pos(p)?;
                    }
                    out.blocked.extend(blocked_key_positions.iter().copied());
                    match layers {
                        None => all_layers = true,
                        Some(ls) => {
                            for &l in ls {
                                check_layer(l)?;
                            }
                            layer_union.extend(ls.iter().copied());
                        }
                    }
                }
            }
        }
        if any_ablation && !all_layers {
            out.ablation_layers = Some(layer_union);
        }
        Ok(out)
    }

    fn ablates(&self, layer: usize) -> bool {
        !self.blocked.is_empty() && self.ablation_layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }
}

/// A model ready for inference. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    weights: WeightStore,
    names: Vec<LayerNames>,
}

/// Per-call trace sinks.
struct Sinks<'a> {
    capture: &'a Capture,
    residual: ResidualTrace,
    attention: AttentionTrace,
}

impl Model {
    pub fn new(spec: ModelSpec, weights: WeightStore) -> Result<Self> {
        // Re-check the pairing; the store may have been built for another spec.
        let weights = WeightStore::new(&spec, weights.into_tensors())?;
        let names = (0..spec.layer_count).map(LayerNames::new).collect();
        Ok(Self { spec, weights, names })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (spec, weights) = WeightStore::load(path)?;
        Self::new(spec, weights)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.spec.max_context {
            return Err(PlanError::SequenceTooLong {
                len: tokens.len(),
                max: self.spec.max_context,
            });
        }
        for &t in tokens {
            if t as usize >= self.spec.vocab_size {
                return Err(PlanError::UnknownToken {
                    id: t,
                    vocab: self.spec.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed(&self, token: u32, position: usize) -> Vec<f32> {
        let mut x = self.weights.get("tok_embed").row(token as usize).to_vec();
        if self.spec.positional_scheme == PositionalScheme::Learned {
            let pos = self.weights.get("pos_embed").row(position);
            for (a, b) in x.iter_mut().zip(pos) {
                *a += *b;
            }
        }
        x
    }

    /// Query, key and value for one position (rotary applied).
    fn qkv(&self, layer: usize, x: &[f32], position: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let n = &self.names[layer];
        let w = &self.weights;
        let d = self.spec.model_dim;
        let h = norm(
            self.spec.norm_scheme,
            x,
            &w.get(&n.norm1_w).data,
            &w.get(&n.norm1_b).data,
        );
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        matvec(&w.get(&n.q_w).data, d, Some(&w.get(&n.q_b).data), &h, &mut q);
        matvec(&w.get(&n.k_w).data, d, Some(&w.get(&n.k_b).data), &h, &mut k);
        matvec(&w.get(&n.v_w).data, d, Some(&w.get(&n.v_b).data), &h, &mut v);
        if self.spec.positional_scheme == PositionalScheme::Rotary {
            let hd = self.spec.head_dim;
            for head in 0..self.spec.head_count {
                rotary(&mut q[head * hd..(head + 1) * hd], position);
                rotary(&mut k[head * hd..(head + 1) * hd], position);
            }
        }
        (q, k, v)
    }

    /// Attention for the query at `position` over `keys[..=position]`,
    /// followed by the output projection. Returns the block's attention
    /// output (to be added to the residual).
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        layer: usize,
        position: usize,
        q: &[f32],
        keys: &[Vec<f32>],
        values: &[Vec<f32>],
        plan: &CompiledPlan,
        sinks: &mut Sinks<'_>,
    ) -> Result<Vec<f32>> {
        let hd = self.spec.head_dim;
        let d = self.spec.model_dim;
        let scale = 1.0 / (hd as f64).sqrt();
        let ablate = plan.ablates(layer);
        if ablate && (0..=position).all(|j| plan.blocked.contains(&j)) {
            return Err(PlanError::InvalidPlan(format!(
                "ablation blocks every key for query {position}"
            )));
        }
        let mut concat = vec![0.0f32; d];
        for head in 0..self.spec.head_count {
            let range = head * hd..(head + 1) * hd;
            let qh = &q[range.clone()];
            let mut scores = Vec::with_capacity(position + 1);
            for (j, key) in keys[..=position].iter().enumerate() {
                if ablate && plan.blocked.contains(&j) {
                    scores.push(f64::NEG_INFINITY);
                    continue;
                }
                let mut acc = 0.0f64;
                for (a, b) in qh.iter().zip(&key[range.clone()]) {
                    acc += f64::from(*a) * f64::from(*b);
                }
                scores.push(acc * scale);
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            let out: Vec<f32> = if let Some(p) = plan.patches.get(&(layer, head, position)) {
                p.clone()
            } else {
                let mut acc = vec![0.0f64; hd];
                for (w, value) in weights.iter().zip(values) {
                    if *w == 0.0 {
                        continue;
                    }
                    for (a, v) in acc.iter_mut().zip(&value[range.clone()]) {
                        *a += w * f64::from(*v);
                    }
                }
                acc.into_iter().map(|v| v as f32).collect()
            };
            if sinks.capture.attention_weights {
                sinks
                    .attention
                    .weights
                    .insert((layer, head, position), weights.iter().map(|&w| w as f32).collect());
            }
            if sinks.capture.head_outputs {
                sinks
                    .attention
                    .head_outputs
                    .insert((layer, head, position), out.clone());
            }
            concat[range].copy_from_slice(&out);
        }
        let n = &self.names[layer];
        let mut proj = vec![0.0; d];
        matvec(
            &self.weights.get(&n.o_w).data,
            d,
            Some(&self.weights.get(&n.o_b).data),
            &concat,
            &mut proj,
        );
        Ok(proj)
    }

    /// MLP half of a block, residual adds, steering and capture for one row.
    fn finish_block(
        &self,
        layer: usize,
        position: usize,
        x: &mut [f32],
        attn_out: &[f32],
        plan: &CompiledPlan,
        sinks: &mut Sinks<'_>,
    ) {
        let n = &self.names[layer];
        let w = &self.weights;
        let d = self.spec.model_dim;
        for (a, b) in x.iter_mut().zip(attn_out) {
            *a += *b;
        }
        let h = norm(
            self.spec.norm_scheme,
            x,
            &w.get(&n.norm2_w).data,
            &w.get(&n.norm2_b).data,
        );
        let mut hidden = vec![0.0; self.spec.mlp_dim];
        matvec(&w.get(&n.up_w).data, d, Some(&w.get(&n.up_b).data), &h, &mut hidden);
        for v in &mut hidden {
            *v = activate(self.spec.activation, *v);
        }
        let mut down = vec![0.0; d];
        matvec(
            &w.get(&n.down_w).data,
            self.spec.mlp_dim,
            Some(&w.get(&n.down_b).data),
            &hidden,
            &mut down,
        );
        for (a, b) in x.iter_mut().zip(&down) {
            *a += *b;
        }
        if let Some((vector, m)) = plan.adds.get(&(layer, position)) {
            for (a, v) in x.iter_mut().zip(vector) {
                *a += *m * *v;
            }
        }
        if sinks.capture.residual.wants(layer, position) {
            sinks.residual.entries.insert((layer, position), x.to_vec());
        }
    }

    fn unembed(&self, x: &[f32]) -> Vec<f32> {
        let w = &self.weights;
        let h = norm(
            self.spec.norm_scheme,
            x,
            &w.get("final_norm.weight").data,
            &w.get("final_norm.bias").data,
        );
        let mut logits = vec![0.0; self.spec.vocab_size];
        matvec(
            &w.get(self.spec.unembed_name()).data,
            self.spec.model_dim,
            None,
            &h,
            &mut logits,
        );
        logits
    }

    /// Full-sequence forward pass.
    pub fn forward(&self, tokens: &[u32], plan: Option<&InterventionPlan>, capture: &Capture) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let plan = CompiledPlan::compile(&self.spec, plan, tokens.len())?;
        let mut sinks = Sinks {
            capture,
            residual: ResidualTrace::default(),
            attention: AttentionTrace::default(),
        };
        let mut xs: Vec<Vec<f32>> = tokens.iter().enumerate().map(|(p, &t)| self.embed(t, p)).collect();
        for layer in 0..self.spec.layer_count {
            let mut qs = Vec::with_capacity(xs.len());
            let mut ks = Vec::with_capacity(xs.len());
            let mut vs = Vec::with_capacity(xs.len());
            for (p, x) in xs.iter().enumerate() {
                let (q, k, v) = self.qkv(layer, x, p);
                qs.push(q);
                ks.push(k);
                vs.push(v);
            }
            for (p, x) in xs.iter_mut().enumerate() {
                let attn = self.attend(layer, p, &qs[p], &ks, &vs, &plan, &mut sinks)?;
                self.finish_block(layer, p, x, &attn, &plan, &mut sinks);
            }
        }
        let logits = xs.iter().map(|x| self.unembed(x)).collect();
        Ok(ForwardOutput {
            logits,
            residual: sinks.residual,
            attention: sinks.attention,
        })
    }

    /// Softmax of the final position's logits.
    pub fn next_token_distribution(
        &self,
        tokens: &[u32],
        plan: Option<&InterventionPlan>,
    ) -> Result<NextTokenDistribution> {
        let out = self.forward(tokens, plan, &Capture::none())?;
        let last = out
            .logits
            .last()
            .ok_or_else(|| PlanError::InvalidPlan("empty token sequence".into()))?;
        Ok(NextTokenDistribution::from_logits(last))
    }

    /// Entry `j` is the distribution after consuming `tokens[..=j]`, all from
    /// one forward pass.
    pub fn teacher_forced_distributions(
        &self,
        tokens: &[u32],
        plan: Option<&InterventionPlan>,
    ) -> Result<Vec<NextTokenDistribution>> {
        let out = self.forward(tokens, plan, &Capture::none())?;
        Ok(out
            .logits
            .iter()
            .map(|l| NextTokenDistribution::from_logits(l))
            .collect())
    }

    /// Incremental decoder with a key/value cache.
    pub fn session(&self, plan: Option<&InterventionPlan>) -> Result<Session<'_>> {
        let plan = CompiledPlan::compile(&self.spec, plan, self.spec.max_context)?;
        Ok(Session {
            model: self,
            plan,
            keys: vec![Vec::new(); self.spec.layer_count],
            values: vec![Vec::new(); self.spec.layer_count],
            capture: Capture::none(),
        })
    }
}

/// Token-by-token decoding state. Interventions apply whenever their
/// absolute position is computed.
pub struct Session<'m> {
    model: &'m Model,
    plan: CompiledPlan,
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<Vec<Vec<f32>>>,
    capture: Capture,
}

impl Session<'_> {
    pub fn position(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    /// Consumes one token and returns the logits at its position.
    pub fn step(&mut self, token: u32) -> Result<Vec<f32>> {
        let model = self.model;
        let spec = &model.spec;
        let position = self.position();
        if position >= spec.max_context {
            return Err(PlanError::SequenceTooLong {
                len: position + 1,
                max: spec.max_context,
            });
        }
        if token as usize >= spec.vocab_size {
            return Err(PlanError::UnknownToken {
                id: token,
                vocab: spec.vocab_size,
            });
        }
        let mut sinks = Sinks {
            capture: &self.capture,
            residual: ResidualTrace::default(),
            attention: AttentionTrace::default(),
        };
        let mut x = model.embed(token, position);
        for layer in 0..spec.layer_count {
            let (q, k, v) = model.qkv(layer, &x, position);
            self.keys[layer].push(k);
            self.values[layer].push(v);
            let attn = model.attend(
                layer,
                position,
                &q,
                &self.keys[layer],
                &self.values[layer],
                &self.plan,
                &mut sinks,
            );
            let attn = match attn {
                Ok(a) => a,
                Err(e) => {
                    // Leave the cache consistent with the last good position.
                    for l in 0..=layer {
                        self.keys[l].truncate(position);
                        self.values[l].truncate(position);
                    }
                    return Err(e);
                }
            };
            model.finish_block(layer, position, &mut x, &attn, &self.plan, &mut sinks);
        }
        Ok(model.unembed(&x))
    }

    /// Feeds several tokens; returns the logits at the last one.
    pub fn feed(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        let mut last = None;
        for &t in tokens {
            last = Some(self.step(t)?);
        }
        last.ok_or_else(|| PlanError::InvalidPlan("feed called with no tokens".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::container::Tensor;
    use crate::runtime::kernels::norm as norm_kernel;
    use crate::runtime::spec::{Activation, NormScheme};

    fn spec(pos: PositionalScheme, norm: NormScheme, act: Activation, tied: bool) -> ModelSpec {
        ModelSpec {
            layer_count: 3,
            head_count: 2,
            model_dim: 8,
            head_dim: 4,
            mlp_dim: 12,
            vocab_size: 17,
            max_context: 12,
            positional_scheme: pos,
            norm_scheme: norm,
            activation: act,
            tied_embeddings: tied,
        }
    }

    fn variants() -> Vec<Model> {
        let mut out = Vec::new();
        for (i, (pos, nrm, act, tied)) in [
            (
                PositionalScheme::Learned,
                NormScheme::PreLayernorm,
                Activation::Gelu,
                false,
            ),
            (PositionalScheme::Rotary, NormScheme::PreRmsnorm, Activation::Silu, true),
            (
                PositionalScheme::Learned,
                NormScheme::PreRmsnorm,
                Activation::Silu,
                true,
            ),
            (
                PositionalScheme::Rotary,
                NormScheme::PreLayernorm,
                Activation::Gelu,
                false,
            ),
        ]
        .into_iter()
        .enumerate()
        {
            let s = spec(pos, nrm, act, tied);
            let w = WeightStore::random(&s, 11 + i as u64, 0.6).unwrap();
            out.push(Model::new(s, w).unwrap());
        }
        out
    }

    const TOKENS: [u32; 9] = [3, 16, 0, 7, 7, 2, 11, 5, 9];

    fn bits(rows: &[Vec<f32>]) -> Vec<Vec<u32>> {
        rows.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect()
    }

    fn add(layer: usize, position: usize, vector: Vec<f32>, multiplier: f32) -> InterventionPlan {
        InterventionPlan::from_interventions([Intervention::ResidualAdd {
            layer,
            position,
            vector,
            multiplier,
        }])
        .unwrap()
    }

    #[test]
    fn zero_blocks_reduce_to_embed_then_unembed() {
        let s = ModelSpec {
            layer_count: 1,
            vocab_size: 8,
            ..spec(
                PositionalScheme::Rotary,
                NormScheme::PreRmsnorm,
                Activation::Gelu,
                false,
            )
        };
        let mut t = WeightStore::zeros(&s).unwrap().into_tensors();
        let emb: Vec<f32> = (0..64).map(|i| ((i * 7 % 13) as f32 - 6.0) / 4.0).collect();
        t.insert("tok_embed".into(), Tensor::new(vec![8, 8], emb.clone()).unwrap());
        let mut eye = vec![0f32; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        t.insert("unembed".into(), Tensor::new(vec![8, 8], eye).unwrap());
        t.insert("final_norm.weight".into(), Tensor::vector(vec![1.0; 8]));
        let m = Model::new(s.clone(), WeightStore::new(&s, t).unwrap()).unwrap();
        let out = m.forward(&[2, 5], None, &Capture::none()).unwrap();
        for (p, &tok) in [2usize, 5].iter().enumerate() {
            let row = &emb[tok * 8..tok * 8 + 8];
            let ms = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / 8.0;
            let inv = 1.0 / (ms + 1e-5).sqrt();
            for (j, &l) in out.logits[p].iter().enumerate() {
                assert!((f64::from(l) - f64::from(row[j]) * inv).abs() < 1e-5);
            }
        }
        let expect = norm_kernel(NormScheme::PreRmsnorm, &emb[16..24], &[1.0; 8], &[0.0; 8]);
        assert_eq!(out.logits[0], expect);
    }

    #[test]
    fn cached_session_matches_forward_bitwise() {
        for m in variants() {
            let plan = add(1, 4, (0..8).map(|i| i as f32 * 0.3 - 1.0).collect(), 1.5);
            for p in [None, Some(&plan)] {
                let full = m.forward(&TOKENS, p, &Capture::none()).unwrap();
                let mut s = m.session(p).unwrap();
                let stepped: Vec<Vec<f32>> = TOKENS.iter().map(|&t| s.step(t).unwrap()).collect();
                assert_eq!(bits(&full.logits), bits(&stepped));
            }
        }
    }

    #[test]
    fn zero_addition_is_identity() {
        for m in variants() {
            let base = m.forward(&TOKENS, None, &Capture::all()).unwrap();
            let zero = m
                .forward(&TOKENS, Some(&add(1, 0, vec![0.0; 8], 1.5)), &Capture::all())
                .unwrap();
            assert_eq!(bits(&base.logits), bits(&zero.logits));
            assert_eq!(base.residual, zero.residual);
        }
    }

    #[test]
    fn addition_is_causal_and_visible_in_trace() {
        for m in variants() {
            let v: Vec<f32> = (0..8).map(|i| (i as f32).sin()).collect();
            let base = m.forward(&TOKENS, None, &Capture::all()).unwrap();
            let steered = m
                .forward(&TOKENS, Some(&add(0, 5, v.clone(), 2.0)), &Capture::all())
                .unwrap();
            assert_eq!(bits(&base.logits[..5]), bits(&steered.logits[..5]));
            assert_ne!(bits(&base.logits[5..]), bits(&steered.logits[5..]));
            let before = base.residual.get(0, 5).unwrap();
            let after = steered.residual.get(0, 5).unwrap();
            for i in 0..8 {
                assert_eq!(after[i], before[i] + 2.0 * v[i]);
            }
        }
    }

    #[test]
    fn multiplier_folds_into_vector() {
        let m = &variants()[0];
        let v: Vec<f32> = (0..8).map(|i| i as f32 * 0.17 - 0.5).collect();
        let scaled: Vec<f32> = v.iter().map(|x| 1.5 * x).collect();
        let a = m.forward(&TOKENS, Some(&add(2, 3, v, 1.5)), &Capture::none()).unwrap();
        let b = m
            .forward(&TOKENS, Some(&add(2, 3, scaled, 1.0)), &Capture::none())
            .unwrap();
        assert_eq!(bits(&a.logits), bits(&b.logits));
    }

    #[test]
    fn attention_rows_are_normalized() {
        for m in variants() {
            let out = m.forward(&TOKENS, None, &Capture::all()).unwrap();
            assert_eq!(out.attention.weights.len(), 3 * 2 * TOKENS.len());
            for (&(_, _, q), w) in &out.attention.weights {
                assert_eq!(w.len(), q + 1);
                assert!(w.iter().all(|&x| x >= 0.0));
                let s: f64 = w.iter().map(|&x| f64::from(x)).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn self_patch_is_identity() {
        for m in variants() {
            let base = m.forward(&TOKENS, None, &Capture::head_outputs()).unwrap();
            let items =
                base.attention
                    .head_outputs
                    .iter()
                    .map(|(&(layer, head, position), v)| Intervention::HeadOutputPatch {
                        layer,
                        head,
                        position,
                        replacement: v.clone(),
                    });
            let plan = InterventionPlan::from_interventions(items).unwrap();
            let patched = m.forward(&TOKENS, Some(&plan), &Capture::none()).unwrap();
            assert_eq!(bits(&base.logits), bits(&patched.logits));
        }
    }

    #[test]
    fn ablation_zeroes_blocked_weights() {
        let m = &variants()[1];
        let plan = InterventionPlan::from_interventions([Intervention::AttentionAblation {
            blocked_key_positions: [2, 4].into(),
            layers: None,
        }])
        .unwrap();
        let out = m.forward(&TOKENS, Some(&plan), &Capture::all()).unwrap();
        for (&(_, _, q), w) in &out.attention.weights {
            for k in [2, 4] {
                if k <= q {
                    assert_eq!(w[k], 0.0);
                }
            }
            let s: f64 = w.iter().map(|&x| f64::from(x)).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        let base = m.forward(&TOKENS, None, &Capture::none()).unwrap();
        assert_eq!(bits(&base.logits[..2]), bits(&out.logits[..2]));
    }

    #[test]
    fn distributions_normalize() {
        let m = &variants()[2];
        let d = m.teacher_forced_distributions(&TOKENS, None).unwrap();
        assert_eq!(d.len(), TOKENS.len());
        for x in &d {
            assert!((x.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(m.teacher_forced_distributions(&[4], None).unwrap().len(), 1);
        let last = m.next_token_distribution(&TOKENS, None).unwrap();
        assert_eq!(&last, d.last().unwrap());
        let uniform = NextTokenDistribution::from_logits(&[0.5; 4]);
        assert!(uniform.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn input_errors() {
        let m = &variants()[0];
        assert!(matches!(
            m.forward(&[0; 13], None, &Capture::none()),
            Err(PlanError::SequenceTooLong { len: 13, max: 12 })
        ));
        assert!(matches!(
            m.forward(&[0, 17], None, &Capture::none()),
            Err(PlanError::UnknownToken { id: 17, .. })
        ));
        for plan in [
            add(3, 0, vec![0.0; 8], 1.0),
            add(0, 9, vec![0.0; 8], 1.0),
            add(0, 0, vec![0.0; 7], 1.0),
        ] {
            assert!(m.forward(&TOKENS, Some(&plan), &Capture::none()).is_err());
        }
        let mut s = m.session(None).unwrap();
        s.feed(&[1; 12]).unwrap();
        assert!(s.step(1).is_err());
        assert_eq!(s.position(), 12);
    }
}
