// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end run of the steering, metric and circuit pipeline on a planted
//! world, checked against its ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{ablation_effect, all_heads, head_patch_recoveries};
use crate::corpus::{CoupletCollection, LexiconIndex};
use crate::error::{PlanError, Result};
use crate::generate::{generate_collection, tokenized_prompts, Split};
use crate::intervene::{steering_plan, Intervention, InterventionPlan};
use crate::metrics::{
    fraction_correct_steered, fraction_high_kl, fraction_top1_difference, regeneration_chance_baseline,
    regeneration_rate, tokens_after_first, trace_pair, Criterion, RegenerationOptions, RegenerationOutcome,
};
use crate::planted::build::{build_planted_model, delete_head};
use crate::planted::oracle::{brute_force_logits, relative_error};
use crate::planted::worlds::{synthetic_world, PlantedModel, PlantedWorld};
use crate::report::csv_field;
use crate::runtime::{derive_seed, Capture, Model, RolloutConfig};
use crate::steer::{sweep, PairPrompts, RolloutEvaluator, SteeringVector, DEFAULT_MULTIPLIER, SWEEP_ROLLOUTS};
use crate::text::{locate_anchors, AnchorKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTestConfig {
    pub seed: u64,
    /// Rollouts per test prompt for flip rates.
    pub samples: usize,
    pub sweep_rollouts: usize,
    pub multiplier: f32,
    /// Random prompts for the oracle comparison.
    pub oracle_prompts: usize,
}

impl Default for SelfTestConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 50,
            sweep_rollouts: SWEEP_ROLLOUTS,
            multiplier: DEFAULT_MULTIPLIER,
            oracle_prompts: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    /// Human-readable pass condition, e.g. `>= 0.95`.
    pub expect: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTestReport {
    pub world: String,
    pub seed: u64,
    pub config_hash: String,
    pub checks: Vec<Check>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("world,seed,config_hash,check,passed,value,expect,detail\n");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{},{}",
                self.world,
                self.seed,
                self.config_hash,
                c.name,
                c.passed,
                c.value,
                csv_field(&c.expect),
                csv_field(&c.detail)
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn at_least(name: &str, value: f64, bound: f64, detail: String) -> Check {
    Check {
        name: name.into(),
        passed: value >= bound,
        value,
        expect: format!(">= {bound}"),
        detail,
    }
}

fn at_most(name: &str, value: f64, bound: f64, detail: String) -> Check {
    Check {
        name: name.into(),
        passed: value <= bound,
        value,
        expect: format!("<= {bound}"),
        detail,
    }
}

fn within(name: &str, value: f64, center: f64, tol: f64, detail: String) -> Check {
    Check {
        name: name.into(),
        passed: (value - center).abs() <= tol,
        value,
        expect: format!("{center} +- {tol}"),
        detail,
    }
}

fn failed(name: &str, err: &PlanError) -> Check {
    Check {
        name: name.into(),
        passed: false,
        value: f64::NAN,
        expect: "no error".into(),
        detail: err.to_string(),
    }
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Shared state for one world's checks.
struct Bench<'a> {
    world: &'a PlantedWorld,
    planted: PlantedModel,
    lexicons: LexiconIndex,
    config: &'a SelfTestConfig,
}

impl Bench<'_> {
    fn model(&self) -> &Model {
        &self.planted.model
    }

    fn prompts(&self, category: &str, split: Split) -> Result<Vec<Vec<u32>>> {
        Ok(
            tokenized_prompts(&self.world.dataset, &self.world.vocab, category, split)?
                .into_iter()
                .map(|(_, t)| t)
                .collect(),
        )
    }

    fn pair_prompts(&self, source: &str, target: &str) -> Result<PairPrompts> {
        Ok(PairPrompts {
            source_category: source.into(),
            target_category: target.into(),
            source_train: self.prompts(source, Split::Train)?,
            target_train: self.prompts(target, Split::Train)?,
        })
    }

    fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            seed: self.config.seed,
            ..RolloutConfig::default()
        }
    }

    fn collection(&self, category: &str, vector: Option<&SteeringVector>) -> Result<CoupletCollection> {
        generate_collection(
            self.model(),
            &self.world.vocab,
            &self.world.dataset,
            category,
            Split::Test,
            self.config.samples,
            &self.rollout_config(),
            vector,
        )
    }

    fn share_in(&self, c: &CoupletCollection, category: &str) -> f64 {
        let hits = c
            .records
            .iter()
            .filter(|r| self.lexicons.classify(r.first_line()) == Some(category))
            .count();
        hits as f64 / c.len() as f64
    }
}

/// Runs every check on `world`. Failures inside a check are reported as a
/// failed check, not as an error.
/// Groups of checks that can be run on their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    /// Runtime against the reference evaluator.
    Oracle,
    /// Greedy behavior, noise bound and copy-head gap.
    Construction,
    /// Estimation, sweep, flips and negation.
    Forward,
    /// Marker flips and regeneration.
    Backward,
    /// Probability traces.
    Traces,
    /// Head patching and ablation.
    Circuit,
    /// Chance baseline on the uncoupled control world.
    Control,
}

impl Section {
    pub const ALL: [Section; 7] = [
        Section::Oracle,
        Section::Construction,
        Section::Forward,
        Section::Backward,
        Section::Traces,
        Section::Circuit,
        Section::Control,
    ];
}

/// Runs every check on `world`. Failures inside a check are reported as a
/// failed check, not as an error.
pub fn self_test(world: &PlantedWorld, config: &SelfTestConfig) -> Result<SelfTestReport> {
    self_test_sections(world, config, &Section::ALL)
}

pub fn self_test_sections(
    world: &PlantedWorld,
    config: &SelfTestConfig,
    sections: &[Section],
) -> Result<SelfTestReport> {
    let planted = world.build()?;
    let bench = Bench {
        world,
        planted,
        lexicons: world.dataset.lexicons(),
        config,
    };
    let mut checks = Vec::new();
    let mut run = |name: &str, f: &dyn Fn() -> Result<Vec<Check>>| match f() {
        Ok(cs) => checks.extend(cs),
        Err(e) => checks.push(failed(name, &e)),
    };
    for section in sections {
        match section {
            Section::Oracle => run("oracle_equivalence", &|| oracle_check(&bench).map(|c| vec![c])),
            Section::Construction => {
                run("greedy_follows_cue", &|| greedy_check(&bench).map(|c| vec![c]));
                run("noise_influence", &|| noise_check(&bench).map(|c| vec![c]));
                run("copy_head_gap", &|| copy_head_checks(&bench));
            }
            Section::Forward => run("forward", &|| forward_checks(&bench)),
            Section::Backward => run("backward", &|| backward_checks(&bench)),
            Section::Traces => run("traces", &|| trace_checks(&bench)),
            Section::Circuit => run("circuit", &|| circuit_checks(&bench)),
            Section::Control => run("control_chance_baseline", &|| control_check(config).map(|c| vec![c])),
        }
    }
    Ok(SelfTestReport {
        world: world.name.clone(),
        seed: config.seed,
        config_hash: config_hash(&world.name, config)?,
        checks,
    })
}

pub fn config_hash(world: &str, config: &SelfTestConfig) -> Result<String> {
    crate::report::config_hash(&(world, config))
}

/// Random planted prompts and interventions, runtime vs reference.
fn oracle_check(b: &Bench<'_>) -> Result<Check> {
    let model = b.model();
    let spec = model.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(b.config.seed, 0xa11ce, 0));
    let mut pool: Vec<Vec<u32>> = Vec::new();
    for c in &b.world.dataset.categories {
        pool.extend(b.prompts(&c.id, Split::Test)?);
    }
    let newlines = b.world.vocab.newline_ids();
    let mut words: Vec<u32> = pool
        .iter()
        .flatten()
        .copied()
        .filter(|t| !newlines.contains(t))
        .collect();
    words.sort_unstable();
    words.dedup();
    let mut worst: f64 = 0.0;
    let mut soup: f64 = 0.0;
    for i in 0..b.config.oracle_prompts {
        let tokens: Vec<u32> = if i % 2 == 0 {
            pool[rng.gen_range(0..pool.len())].clone()
        } else {
            // Preamble, a random run of world tokens, the closing newline.
            let base = &pool[rng.gen_range(0..pool.len())];
            let cut = base.iter().position(|t| newlines.contains(t)).map_or(0, |p| p + 1);
            let mut t = base[..cut].to_vec();
            let len = rng.gen_range(1..16);
            t.extend((0..len).map(|_| words[rng.gen_range(0..words.len())]));
            t.push(*base.last().expect("non-empty prompt"));
            t
        };
        // Arbitrary token ids, outside the planted grammar: reported, not gated.
        let noise: Vec<u32> = (0..rng.gen_range(1..24))
            .map(|_| rng.gen_range(0..spec.vocab_size as u32))
            .collect();
        let out = model.forward(&noise, None, &Capture::none())?;
        soup = soup.max(relative_error(
            &out.logits,
            &brute_force_logits(spec, model.weights(), &noise, None)?,
        )?);
        let n = tokens.len();
        let mut plans = vec![None];
        let mut plan = InterventionPlan::new();
        plan.push(Intervention::ResidualAdd {
            layer: rng.gen_range(0..spec.layer_count),
            position: rng.gen_range(0..n),
            vector: (0..spec.model_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            multiplier: rng.gen_range(-2.0..2.0),
        })?;
        plan.push(Intervention::HeadOutputPatch {
            layer: rng.gen_range(0..spec.layer_count),
            head: rng.gen_range(0..spec.head_count),
            position: rng.gen_range(0..n),
            replacement: (0..spec.head_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })?;
        if n > 1 {
            plan.push(Intervention::AttentionAblation {
                blocked_key_positions: [rng.gen_range(1..n)].into(),
                layers: None,
            })?;
        }
        plans.push(Some(plan));
        for p in &plans {
            let fast = model.forward(&tokens, p.as_ref(), &Capture::none())?;
            let slow = brute_force_logits(spec, model.weights(), &tokens, p.as_ref())?;
            worst = worst.max(relative_error(&fast.logits, &slow)?);
        }
    }
    Ok(at_most(
        "oracle_equivalence",
        worst,
        1e-6,
        format!(
            "{} prompts with and without interventions; arbitrary token ids {soup:.2e}",
            b.config.oracle_prompts
        ),
    ))
}

/// Temperature 0: cued prompts produce the cued marker, then a category
/// token of the same side, then the line end.
fn greedy_check(b: &Bench<'_>) -> Result<Check> {
    let t = &b.planted.truth.tokens;
    let cfg = RolloutConfig {
        temperature: 0.0,
        ..b.rollout_config()
    };
    let (mut ok, mut total) = (0usize, 0usize);
    for c in &b.world.dataset.categories {
        for p in b.prompts(&c.id, Split::Test)? {
            let side = t
                .cued_side(&p)
                .ok_or_else(|| PlanError::Planted("test prompt without cue".into()))?;
            let out = crate::runtime::sample_completion(b.model(), &p, &cfg, None, b.world.vocab.newline_ids())?;
            total += 1;
            if out.len() == 3
                && out[0] == t.markers[side]
                && t.side_of_category(out[1]) == Some(side)
                && out[2] == t.line_end
            {
                ok += 1;
            }
        }
    }
    Ok(at_least(
        "greedy_follows_cue",
        ok as f64 / total as f64,
        1.0,
        format!("{ok}/{total} greedy completions are marker, category, line end"),
    ))
}

fn marker_gap(model: &Model, tokens: &[u32], markers: [u32; 2]) -> Result<f64> {
    let out = model.forward(tokens, None, &Capture::none())?;
    let l = out.logits.last().expect("non-empty");
    Ok(l[markers[0] as usize] as f64 - l[markers[1] as usize] as f64)
}

/// Marker logit gap with and without the weight noise.
fn noise_check(b: &Bench<'_>) -> Result<Check> {
    let mut clean = b.world.spec.clone();
    clean.noise = 0.0;
    let (spec, weights, _) = build_planted_model(&clean, &b.world.vocab)?;
    let quiet = Model::new(spec, weights)?;
    let markers = b.planted.truth.tokens.markers;
    let mut worst: f64 = 0.0;
    for c in &b.world.dataset.categories {
        for p in b.prompts(&c.id, Split::Test)? {
            worst = worst.max((marker_gap(b.model(), &p, markers)? - marker_gap(&quiet, &p, markers)?).abs());
        }
    }
    let g = b.planted.truth.logit_gap;
    Ok(Check {
        name: "noise_influence".into(),
        passed: worst < g / 10.0,
        value: worst,
        expect: format!("< {}", g / 10.0),
        detail: "largest marker-gap change caused by weight noise".into(),
    })
}

/// Half the difference, between A-cued and B-cued prompts, of the category
/// logit gap after a fixed marker.
fn cue_gap(b: &Bench<'_>, model: &Model) -> Result<f64> {
    let t = &b.planted.truth.tokens;
    let cats = &b.planted.truth.categories;
    let mean_gap = |tokens: &[u32]| -> Result<f64> {
        let out = model.forward(tokens, None, &Capture::none())?;
        let l = out.logits.last().expect("non-empty");
        let mean = |ids: &[u32]| ids.iter().map(|&i| l[i as usize] as f64).sum::<f64>() / ids.len() as f64;
        Ok(mean(&t.categories[0]) - mean(&t.categories[1]))
    };
    let mut per_side = [0.0; 2];
    for (s, cat) in cats.iter().enumerate() {
        let prompts = b.prompts(cat, Split::Test)?;
        for p in &prompts {
            let mut forced = p.clone();
            forced.push(t.markers[0]);
            per_side[s] += mean_gap(&forced)? / prompts.len() as f64;
        }
    }
    Ok((per_side[0] - per_side[1]) / 2.0)
}

fn copy_head_checks(b: &Bench<'_>) -> Result<Vec<Check>> {
    let g = b.planted.truth.logit_gap;
    let gap = cue_gap(b, b.model())?;
    let (l, h) = b.planted.truth.copy_head;
    let spec = b.model().spec().clone();
    let without = Model::new(spec.clone(), delete_head(&spec, b.model().weights(), l, h)?)?;
    let gap_without = cue_gap(b, &without)?;
    Ok(vec![
        within(
            "cue_gap",
            gap,
            g,
            g / 5.0,
            "category gap between cues after a fixed marker".into(),
        ),
        Check {
            name: "cue_gap_without_copy_head".into(),
            passed: gap_without.abs() < g / 10.0,
            value: gap_without,
            expect: format!("|x| < {}", g / 10.0),
            detail: format!("head ({l}, {h}) weights zeroed"),
        },
    ])
}

/// The first dataset pair with its train prompts and plan-site vector.
struct Steering {
    source: String,
    target: String,
    src_side: usize,
    tgt_side: usize,
    pairs: PairPrompts,
    vector: SteeringVector,
    test: Vec<Vec<u32>>,
}

impl Bench<'_> {
    fn steering(&self) -> Result<Steering> {
        let truth = &self.planted.truth;
        let pair = self
            .world
            .dataset
            .pairs
            .first()
            .ok_or_else(|| PlanError::Planted("world has no pairs".into()))?;
        let (source, target) = (pair.source.clone(), pair.target.clone());
        let pairs = self.pair_prompts(&source, &target)?;
        let vector = pairs.estimate(
            self.model(),
            &self.world.vocab,
            truth.plan_layer,
            truth.plan_anchor,
            self.config.multiplier,
        )?;
        Ok(Steering {
            src_side: truth.side_of(&source)?,
            tgt_side: truth.side_of(&target)?,
            test: self.prompts(&source, Split::Test)?,
            source,
            target,
            pairs,
            vector,
        })
    }

    fn regeneration_options(&self) -> RegenerationOptions {
        RegenerationOptions {
            config: RolloutConfig {
                seed: self.config.seed,
                ..RegenerationOptions::default().config
            },
            ..RegenerationOptions::default()
        }
    }
}

/// Estimation, sweep, category flips and negation.
fn forward_checks(b: &Bench<'_>) -> Result<Vec<Check>> {
    let truth = &b.planted.truth;
    let st = b.steering()?;
    let m = b.config.multiplier;
    let mut checks = Vec::new();

    let cos = cosine(&st.vector.values, &truth.expected_vector(&st.source, &st.target)?);
    checks.push(at_least(
        "vector_alignment",
        cos,
        0.99,
        format!(
            "cosine with the planted direction, {} + {} train prompts",
            st.pairs.source_train.len(),
            st.pairs.target_train.len()
        ),
    ));

    let lex = &b.lexicons;
    let target = st.target.as_str();
    let evaluator = RolloutEvaluator {
        vocab: &b.world.vocab,
        test_prompts: &st.test,
        config: b.rollout_config(),
        samples: b.config.sweep_rollouts,
        is_target: |_: &[u32], completion: &[u32]| {
            b.world
                .vocab
                .decode(completion)
                .map(|text| lex.classify(crate::corpus::first_line(&text)) == Some(target))
                .unwrap_or(false)
        },
    };
    let layers: BTreeSet<usize> = (0..b.model().spec().layer_count).collect();
    let anchors: BTreeSet<AnchorKind> = [AnchorKind::LastWord, AnchorKind::Newline].into();
    let result = sweep(b.model(), &b.world.vocab, &st.pairs, &layers, &anchors, m, &evaluator)?;
    let grid: Vec<String> = result
        .cells()
        .iter()
        .map(|c| format!("({} {})={:.2}", c.layer, c.anchor, c.effectiveness))
        .collect();
    let planted_cell = (truth.plan_layer, truth.plan_anchor);
    checks.push(Check {
        name: "sweep_selects_plan_cell".into(),
        passed: result.best == planted_cell && result.best_effectiveness() >= 0.95,
        value: result.best_effectiveness(),
        expect: format!("best = ({} {}) with >= 0.95", planted_cell.0, planted_cell.1),
        detail: grid.join(" "),
    });

    let steered = b.collection(&st.source, Some(&st.vector))?;
    let flip = fraction_correct_steered(&steered, lex)?;
    checks.push(at_least(
        "forward_flip_rate",
        flip,
        0.95,
        format!("{} rollouts", steered.len()),
    ));
    let mut worst_other: f64 = 0.0;
    let mut other_detail = Vec::new();
    for layer in layers.iter().filter(|&&l| l != truth.plan_layer) {
        for &anchor in &anchors {
            let v = st.pairs.estimate(b.model(), &b.world.vocab, *layer, anchor, m)?;
            let r = fraction_correct_steered(&b.collection(&st.source, Some(&v))?, lex)?;
            other_detail.push(format!("({layer} {anchor})={r:.3}"));
            worst_other = worst_other.max(r);
        }
    }
    checks.push(at_most(
        "non_plan_layer_flip_rate",
        worst_other,
        0.10,
        other_detail.join(" "),
    ));

    let restored = b.collection(&st.source, Some(&st.vector.negated()))?;
    let restore = b.share_in(&restored, &st.source);
    checks.push(at_least(
        "negated_vector_keeps_source",
        restore,
        0.95,
        format!("{} rollouts", restored.len()),
    ));
    let probe = &st.test[0];
    let anchors_at = locate_anchors(&b.world.vocab, probe)?;
    let plan = steering_plan(&st.vector, &anchors_at, st.vector.anchor_kind)?;
    let cancelled = plan.compose(&plan.negated())?;
    let a = b.model().forward(probe, None, &Capture::none())?.logits;
    let c = b.model().forward(probe, Some(&cancelled), &Capture::none())?.logits;
    let same = a
        .iter()
        .flatten()
        .zip(c.iter().flatten())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    checks.push(Check {
        name: "vector_plus_negation_is_identity".into(),
        passed: same,
        value: same as u8 as f64,
        expect: "bit-identical logits".into(),
        detail: String::new(),
    });
    Ok(checks)
}

/// Marker flips and regeneration of steered lines.
fn backward_checks(b: &Bench<'_>) -> Result<Vec<Check>> {
    let truth = &b.planted.truth;
    let st = b.steering()?;
    let lex = &b.lexicons;
    let mut checks = Vec::new();
    let steered = b.collection(&st.source, Some(&st.vector))?;
    let marker_hits = steered
        .records
        .iter()
        .filter(|r| r.completion_tokens.first() == Some(&truth.tokens.markers[st.tgt_side]))
        .count();
    checks.push(at_least(
        "marker_flip_rate",
        marker_hits as f64 / steered.len() as f64,
        0.90,
        format!(
            "{marker_hits}/{} steered rollouts start with the target marker",
            steered.len()
        ),
    ));

    let opts = b.regeneration_options();
    let steered_regen = regeneration_rate(b.model(), &b.world.vocab, &steered, lex, &opts)?.rate()?;
    let mut baseline = RegenerationOutcome::default();
    for cat in &truth.categories {
        let unsteered = b.collection(cat, None)?;
        baseline.merge(&regeneration_rate(b.model(), &b.world.vocab, &unsteered, lex, &opts)?);
    }
    let base_rate = baseline.rate()?;
    checks.push(within(
        "steered_regeneration_matches_baseline",
        steered_regen - base_rate,
        0.0,
        0.10,
        format!("steered {steered_regen:.3} vs baseline {base_rate:.3}"),
    ));
    let chance = regeneration_chance_baseline(&baseline)?;
    let worst_chance = chance.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check {
        name: "regeneration_above_chance".into(),
        passed: worst_chance < base_rate,
        value: base_rate - worst_chance,
        expect: "> 0".into(),
        detail: format!("baseline {base_rate:.3}, chance {chance:?}"),
    });
    Ok(checks)
}

/// Probability traces over the second line.
fn trace_checks(b: &Bench<'_>) -> Result<Vec<Check>> {
    let st = b.steering()?;
    let baseline = b.collection(&st.source, None)?;
    let zero = SteeringVector {
        values: vec![0.0; st.vector.values.len()],
        ..st.vector.clone()
    };
    let mut zero_div = Vec::new();
    let mut div = Vec::new();
    for r in baseline.records.iter().take(40) {
        zero_div.push(trace_pair(b.model(), &b.world.vocab, r, &zero)?.divergence()?);
        div.push(trace_pair(b.model(), &b.world.vocab, r, &st.vector)?.divergence()?);
    }
    let z = fraction_high_kl(&zero_div)? + fraction_top1_difference(&zero_div)?;
    let high = fraction_high_kl(&div)?;
    let first = tokens_after_first(&div, Criterion::Top1Diff)?;
    Ok(vec![
        Check {
            name: "zero_vector_traces_identical".into(),
            passed: z == 0.0,
            value: z,
            expect: "== 0".into(),
            detail: "high-KL plus top-1 fractions under a zero vector".into(),
        },
        at_least(
            "steered_traces_diverge_from_first_token",
            high.min(first),
            0.9,
            format!("fraction_high_kl {high:.3}, tokens_after_first(top1) {first:.3}"),
        ),
    ])
}

/// Patch each head, then block attention to the plan position.
fn circuit_checks(b: &Bench<'_>) -> Result<Vec<Check>> {
    let truth = &b.planted.truth;
    let st = b.steering()?;
    let heads = all_heads(b.model());
    let (target, source) = (truth.tokens.markers[st.tgt_side], truth.tokens.markers[st.src_side]);
    let mut copy = f64::INFINITY;
    let mut other: f64 = 0.0;
    let mut worst_ablation: f64 = 0.0;
    for p in st.test.iter().take(10) {
        let anchors_at = locate_anchors(&b.world.vocab, p)?;
        let plan = steering_plan(&st.vector, &anchors_at, st.vector.anchor_kind)?;
        for r in head_patch_recoveries(b.model(), p, &plan, &heads, target, source)? {
            if (r.layer, r.head) == truth.copy_head {
                copy = copy.min(r.recovery_percent);
            } else {
                other = other.max(r.recovery_percent.abs());
            }
        }
        let at = anchors_at.resolve(truth.plan_anchor)?;
        let outcome = ablation_effect(b.model(), p, Some(&plan), [at].into(), &[target], &[source])?;
        worst_ablation = worst_ablation.max((outcome.after - 0.5).abs());
    }
    Ok(vec![
        at_least(
            "copy_head_patch_recovery",
            copy / 100.0,
            0.95,
            "worst prompt, as a fraction".into(),
        ),
        at_most(
            "other_head_patch_recovery",
            other / 100.0,
            0.05,
            "largest |recovery| over other heads".into(),
        ),
        at_most(
            "plan_ablation_to_chance",
            worst_ablation,
            0.05,
            "largest |target share - 0.5| with the plan position blocked".into(),
        ),
    ])
}

/// With no marker coupling the regeneration prompt says nothing about the
/// category, so the chance baseline sits at 1/2.
fn control_check(config: &SelfTestConfig) -> Result<Check> {
    let world = synthetic_world(0.0)?;
    let planted = world.build()?;
    let lex = world.dataset.lexicons();
    let cfg = RolloutConfig {
        seed: config.seed,
        ..RolloutConfig::default()
    };
    let opts = RegenerationOptions {
        config: RolloutConfig {
            seed: config.seed,
            ..RegenerationOptions::default().config
        },
        ..RegenerationOptions::default()
    };
    let mut outcome = crate::metrics::RegenerationOutcome::default();
    for c in &world.dataset.categories {
        let coll = generate_collection(
            &planted.model,
            &world.vocab,
            &world.dataset,
            &c.id,
            Split::Test,
            config.samples,
            &cfg,
            None,
        )?;
        outcome.merge(&regeneration_rate(&planted.model, &world.vocab, &coll, &lex, &opts)?);
    }
    let chance: BTreeMap<String, f64> = regeneration_chance_baseline(&outcome)?;
    let worst = chance.values().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
    Ok(at_most(
        "control_chance_baseline",
        worst,
        0.05,
        format!("largest |chance - 0.5| over {chance:?}"),
    ))
}
