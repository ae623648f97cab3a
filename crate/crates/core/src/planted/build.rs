// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-set weights for the planted planning circuit.
//!
//! The circuit is laid out on named residual coordinates, then every
//! residual-facing weight is expressed in a seeded random orthonormal basis
//! and perturbed with small noise.
//!
//! Block 0: head 0 attends from every position to cue tokens and writes the
//! cue polarity (`CUE_CTX`) and a cue-seen flag (`PRESENT`). The MLP, gated
//! on delimiter tokens, writes `+-alpha` to `PLAN_SRC` and raises `DELIM`
//! where a delimiter follows a cue.
//!
//! Block 1: the copy head attends to `DELIM` positions and moves `PLAN_SRC`
//! into `PLAN_DST`. The unembedding reads `PLAN_DST` for markers (at marker
//! slots) and categories (after a marker), and the marker polarity for
//! categories.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PlanError, Result};
use crate::planted::spec::{GroundTruth, PlantedSpec};
use crate::runtime::spec::LayerNames;
use crate::runtime::{Activation, ModelSpec, NormScheme, PositionalScheme, Tensor, WeightStore};
use crate::text::{AnchorKind, Vocabulary};

const BIAS: usize = 0;
const CUE_POL: usize = 1;
const IS_CUE: usize = 2;
const NL: usize = 3;
const MSLOT: usize = 4;
const PLAN_SRC: usize = 5;
const PLAN_DST: usize = 6;
const PRESENT: usize = 7;
const IS_MARKER: usize = 8;
const MARKER_POL: usize = 9;
const IS_CAT: usize = 10;
const CUE_CTX: usize = 11;
const DELIM: usize = 12;
const FREE: usize = 13;

/// Smallest residual width that holds the named coordinates plus a few
/// free ones.
pub const MIN_MODEL_DIM: usize = FREE + 3;

/// Residual bias magnitude. Keeps the norm scale close to 1.
const B: f64 = 16.0;
const CUE_BETA: f64 = 0.5;
/// Cue polarity after the cue head.
const CUE_CTX_GAIN: f64 = 1.0;
const CUE_SCORE: f64 = 12.0;
const COPY_SCORE: f64 = 16.0;
const GATE: f64 = 9.0;
/// Input slope of the delimiter units. Gain sits on the input side so
/// that offsets in the gate arguments stay small in the output.
const SHARPEN: f64 = 3.0;
/// `SHARPEN * CUE_CTX_GAIN`.
const ALPHA: f64 = 3.0;
const SLOT_LOGIT: f64 = 20.0;
const TOKEN_CONTENT: f64 = 0.3;
const POSITION_CONTENT: f64 = 0.1;

/// Row-major `[rows, cols]` matrix in canonical coordinates.
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Seeded orthonormal basis by Gram-Schmidt on uniform samples.
fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut q = Mat::zeros(d, d);
    let mut c = 0;
    while c < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for prev in 0..c {
            let dot: f64 = (0..d).map(|r| v[r] * q.at(r, prev)).sum();
            for (r, x) in v.iter_mut().enumerate() {
                *x -= dot * q.at(r, prev);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        for (r, x) in v.iter().enumerate() {
            q.set(r, c, x / n);
        }
        c += 1;
    }
    q
}

/// Columns of `q` are the canonical coordinates expressed in the model basis.
struct Basis {
    q: Mat,
}

impl Basis {
    /// `Q v` for a canonical residual vector.
    fn vector(&self, v: &[f64]) -> Vec<f64> {
        let d = self.q.rows;
        (0..d).map(|r| (0..d).map(|c| self.q.at(r, c) * v[c]).sum()).collect()
    }

    /// `W Q^T` for a matrix that reads the residual.
    fn reading(&self, w: &Mat) -> Mat {
        let d = self.q.rows;
        let mut out = Mat::zeros(w.rows, d);
        for r in 0..w.rows {
            for c in 0..d {
                out.set(r, c, (0..d).map(|k| w.at(r, k) * self.q.at(c, k)).sum());
            }
        }
        out
    }

    /// `Q W` for a matrix that writes the residual.
    fn writing(&self, w: &Mat) -> Mat {
        let d = self.q.rows;
        let mut out = Mat::zeros(d, w.cols);
        for r in 0..d {
            for c in 0..w.cols {
                out.set(r, c, (0..d).map(|k| self.q.at(r, k) * w.at(k, c)).sum());
            }
        }
        out
    }
}

struct Noise {
    rng: ChaCha8Rng,
    std: f64,
}

impl Noise {
    fn tensor(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        // Uniform with the requested standard deviation.
        let half = self.std * 3f64.sqrt();
        let data = data
            .into_iter()
            .map(|v| {
                let n = if half > 0.0 {
                    self.rng.gen_range(-half..half)
                } else {
                    0.0
                };
                (v + n) as f32
            })
            .collect();
        Tensor::new(shape, data)
    }
}

/// Builds the planted model for `spec` over `vocab`.
pub fn build_planted_model(spec: &PlantedSpec, vocab: &Vocabulary) -> Result<(ModelSpec, WeightStore, GroundTruth)> {
    spec.validate()?;
    let tokens = spec.resolve(vocab)?;
    let d = spec.model_dim;
    let hd = d / spec.head_count;
    let model = ModelSpec {
        layer_count: 2,
        head_count: spec.head_count,
        model_dim: d,
        head_dim: hd,
        mlp_dim: spec.mlp_dim,
        vocab_size: vocab.len(),
        max_context: spec.max_context,
        positional_scheme: PositionalScheme::Learned,
        norm_scheme: NormScheme::PreRmsnorm,
        activation: Activation::Gelu,
        tied_embeddings: false,
    };
    model.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = Basis {
        q: random_rotation(d, &mut rng),
    };
    let mut content = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc0ff_ee00);
    let mut noise = Noise {
        rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0dd5_eed5),
        std: spec.noise,
    };
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut put = |name: String, shape: Vec<usize>, data: Vec<f64>, noise: &mut Noise| -> Result<()> {
        tensors.insert(name, noise.tensor(shape, data)?);
        Ok(())
    };

    // Embeddings.
    let sign = [1.0, -1.0];
    let mut embed = Vec::with_capacity(vocab.len() * d);
    for t in 0..vocab.len() as u32 {
        let mut e = vec![0.0; d];
        e[BIAS] = B;
        for x in &mut e[FREE..] {
            *x = content.gen_range(-TOKEN_CONTENT..TOKEN_CONTENT);
        }
        for s in 0..2 {
            if tokens.cues[s].contains(&t) {
                e[CUE_POL] = sign[s] * CUE_BETA;
                e[IS_CUE] = 1.0;
            }
            if tokens.markers[s] == t {
                e[IS_MARKER] = 1.0;
                e[MARKER_POL] = sign[s];
            }
            if tokens.categories[s].contains(&t) {
                e[IS_CAT] = 1.0;
            }
        }
        if tokens.delimiters.contains(&t) {
            e[NL] = 1.0;
        }
        if tokens.marker_slots.contains(&t) {
            e[MSLOT] = 1.0;
        }
        embed.extend(basis.vector(&e));
    }
    put("tok_embed".into(), vec![vocab.len(), d], embed, &mut noise)?;
    let mut pos = Vec::with_capacity(spec.max_context * d);
    for _ in 0..spec.max_context {
        let mut e = vec![0.0; d];
        for x in &mut e[FREE..] {
            *x = content.gen_range(-POSITION_CONTENT..POSITION_CONTENT);
        }
        pos.extend(basis.vector(&e));
    }
    put("pos_embed".into(), vec![spec.max_context, d], pos, &mut noise)?;

    // With gain B / sqrt(d), the normed residual is x * B / |x|.
    let gain = vec![B / (d as f64).sqrt(); d];
    let zeros_d = vec![0.0; d];
    let sqrt_hd = (hd as f64).sqrt();
    let (copy_layer, copy_head) = spec.copy_head;
    for layer in 0..2 {
        let n = LayerNames::new(layer);
        let mut q = Mat::zeros(d, d);
        let mut k = Mat::zeros(d, d);
        let mut v = Mat::zeros(d, d);
        let mut o = Mat::zeros(d, d);
        let mut up = Mat::zeros(spec.mlp_dim, d);
        let mut down = Mat::zeros(d, spec.mlp_dim);
        if layer == 0 {
            // Cue head (head 0).
            q.set(0, BIAS, 1.0 / B);
            k.set(0, IS_CUE, CUE_SCORE * sqrt_hd);
            v.set(0, CUE_POL, CUE_CTX_GAIN / CUE_BETA);
            v.set(1, IS_CUE, 1.0);
            o.set(CUE_CTX, 0, 1.0);
            o.set(PRESENT, 1, 1.0);
            // GELU(a) - GELU(-a) = a, so units 0 and 1 pass the cue
            // polarity through on delimiters and cancel elsewhere. On a
            // delimiter the polarity moves from CUE_CTX to PLAN_SRC.
            for (unit, s) in [(0, 1.0), (1, -1.0)] {
                up.set(unit, CUE_CTX, s * SHARPEN);
                up.set(unit, NL, GATE);
                up.set(unit, BIAS, -GATE / B);
                down.set(PLAN_SRC, unit, s);
                down.set(CUE_CTX, unit, -s / SHARPEN);
            }
            // Delimiter after a cue.
            up.set(2, NL, GATE);
            up.set(2, PRESENT, GATE);
            up.set(2, BIAS, -1.5 * GATE / B);
            down.set(DELIM, 2, 2.0 / GATE);
        }
        if layer == copy_layer {
            let r = copy_head * hd;
            q.set(r, BIAS, 1.0 / B);
            k.set(r, DELIM, COPY_SCORE * sqrt_hd);
            v.set(r, PLAN_SRC, 1.0);
            o.set(PLAN_DST, r, 1.0);
        }
        put(n.norm1_w, vec![d], gain.clone(), &mut noise)?;
        put(n.norm1_b, vec![d], zeros_d.clone(), &mut noise)?;
        for (wn, bn, m) in [(n.q_w, n.q_b, &q), (n.k_w, n.k_b, &k), (n.v_w, n.v_b, &v)] {
            put(wn, vec![d, d], basis.reading(m).data, &mut noise)?;
            put(bn, vec![d], zeros_d.clone(), &mut noise)?;
        }
        put(n.o_w, vec![d, d], basis.writing(&o).data, &mut noise)?;
        put(n.o_b, vec![d], zeros_d.clone(), &mut noise)?;
        put(n.norm2_w, vec![d], gain.clone(), &mut noise)?;
        put(n.norm2_b, vec![d], zeros_d.clone(), &mut noise)?;
        put(n.up_w, vec![spec.mlp_dim, d], basis.reading(&up).data, &mut noise)?;
        put(n.up_b, vec![spec.mlp_dim], vec![0.0; spec.mlp_dim], &mut noise)?;
        put(n.down_w, vec![d, spec.mlp_dim], basis.writing(&down).data, &mut noise)?;
        put(n.down_b, vec![d], zeros_d.clone(), &mut noise)?;
    }
    put("final_norm.weight".into(), vec![d], gain, &mut noise)?;
    put("final_norm.bias".into(), vec![d], zeros_d, &mut noise)?;

    let u = spec.logit_gap / (2.0 * ALPHA);
    let mut unembed = Mat::zeros(vocab.len(), d);
    for s in 0..2 {
        let m = tokens.markers[s] as usize;
        unembed.set(m, MSLOT, SLOT_LOGIT);
        unembed.set(m, PLAN_DST, sign[s] * u);
        for &c in &tokens.categories[s] {
            let c = c as usize;
            unembed.set(c, IS_MARKER, SLOT_LOGIT);
            unembed.set(c, PLAN_DST, sign[s] * u);
            unembed.set(c, MARKER_POL, sign[s] * spec.marker_coupling);
        }
    }
    unembed.set(tokens.line_end as usize, IS_CAT, SLOT_LOGIT);
    put(
        "unembed".into(),
        vec![vocab.len(), d],
        basis.reading(&unembed).data,
        &mut noise,
    )?;

    let weights = WeightStore::new(&model, tensors)?;
    let mut direction = vec![0.0; d];
    direction[PLAN_SRC] = 1.0;
    let truth = GroundTruth {
        categories: [spec.a.category.clone(), spec.b.category.clone()],
        tokens,
        plan_direction: basis.vector(&direction).into_iter().map(|x| x as f32).collect(),
        plan_magnitude: ALPHA,
        plan_layer: 0,
        plan_anchor: AnchorKind::Newline,
        copy_head: spec.copy_head,
        logit_gap: spec.logit_gap,
        marker_coupling: spec.marker_coupling,
    };
    Ok((model, weights, truth))
}

/// Copy of `weights` with every projection of `head` in `layer` zeroed.
pub fn delete_head(model: &ModelSpec, weights: &WeightStore, layer: usize, head: usize) -> Result<WeightStore> {
    if layer >= model.layer_count || head >= model.head_count {
        return Err(PlanError::Planted(format!("no head ({layer}, {head})")));
    }
    let d = model.model_dim;
    let hd = model.head_dim;
    let n = LayerNames::new(layer);
    let mut tensors = weights.clone().into_tensors();
    for name in [&n.q_w, &n.k_w, &n.v_w] {
        let t = tensors.get_mut(name.as_str()).expect("layout checked");
        for r in head * hd..(head + 1) * hd {
            t.data[r * d..(r + 1) * d].fill(0.0);
        }
    }
    for name in [&n.q_b, &n.k_b, &n.v_b] {
        tensors.get_mut(name.as_str()).expect("layout checked").data[head * hd..(head + 1) * hd].fill(0.0);
    }
    let o = tensors.get_mut(n.o_w.as_str()).expect("layout checked");
    for r in 0..d {
        o.data[r * d + head * hd..r * d + (head + 1) * hd].fill(0.0);
    }
    WeightStore::new(model, tensors)
}
