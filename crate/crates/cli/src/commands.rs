// SPDX-License-Identifier: MIT OR Apache-2.0

//! One function per subcommand.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::Context;
use planlab::circuit::{ablation_effect, all_heads, head_patch_recoveries};
use planlab::corpus::{CategoryPair, CoupletCollection, Dataset, LexiconIndex, Severity};
use planlab::generate::{generate_collection, tokenized_prompts, Split};
use planlab::intervene::steering_plan;
use planlab::metrics::{
    correlation_report, fraction_correct_rhyme_family, fraction_correct_steered, fraction_high_kl,
    fraction_top1_difference, qa_fractions, qa_fractions_expected, regeneration_chance_baseline, regeneration_rate,
    token_stats, tokens_after_first, trace_pair, Criterion, Grouping, MetricReport, RegenerationOptions,
    RegenerationOutcome,
};
use planlab::planted::{self_test, world, SelfTestConfig, WORLD_NAMES};
use planlab::report::render_matrix_csv;
use planlab::runtime::{Model, RolloutConfig};
use planlab::steer::{
    doubling_sizes, middle_layers, sweep, train_size_curve, PairPrompts, RolloutEvaluator, SteeringVector,
};
use planlab::text::{locate_anchors, AnchorKind, Vocabulary};
use rayon::prelude::*;
use serde::Deserialize;

use crate::ctx::{invalid, load_dataset, slug, Classify, CmdResult, Loaded, Out, Table};
use crate::{
    AblateArgs, CorrelationArgs, CurveArgs, EstimateArgs, EvalArgs, GenerateArgs, PatchArgs, PlantedBuildArgs,
    ProbArgs, ProbeArgs, RegenArgs, SamplingArgs, SelftestArgs, SiteArgs, SweepArgs, TokenStatsArgs, ValidateArgs,
};

fn f(v: f64) -> String {
    v.to_string()
}

fn rollout_config(sampling: &SamplingArgs, seed: u64) -> RolloutConfig {
    RolloutConfig {
        temperature: sampling.temperature,
        max_new_tokens: sampling.max_new_tokens,
        seed,
        ..RolloutConfig::default()
    }
}

fn prompts(vocab: &Vocabulary, dataset: &Dataset, category: &str, split: Split) -> CmdResult<Vec<Vec<u32>>> {
    Ok(tokenized_prompts(dataset, vocab, category, split)
        .invalid()?
        .into_iter()
        .map(|(_, t)| t)
        .collect())
}

fn resolve_pairs(dataset: &Dataset, labels: &[String]) -> CmdResult<Vec<CategoryPair>> {
    if labels.is_empty() {
        if dataset.pairs.is_empty() {
            return invalid(format!("dataset `{}` declares no pairs; pass --pair", dataset.name));
        }
        return Ok(dataset.pairs.clone());
    }
    labels.iter().map(|l| dataset.pair(l).cloned().invalid()).collect()
}

fn pair_prompts(vocab: &Vocabulary, dataset: &Dataset, pair: &CategoryPair) -> CmdResult<PairPrompts> {
    Ok(PairPrompts {
        source_category: pair.source.clone(),
        target_category: pair.target.clone(),
        source_train: prompts(vocab, dataset, &pair.source, Split::Train)?,
        target_train: prompts(vocab, dataset, &pair.target, Split::Train)?,
    })
}

fn layers(site: &SiteArgs, model: &Model) -> CmdResult<BTreeSet<usize>> {
    let n = model.spec().layer_count;
    if site.layers.is_empty() {
        return Ok(middle_layers(n).into_iter().collect());
    }
    if let Some(bad) = site.layers.iter().find(|&&l| l >= n) {
        return invalid(format!("layer {bad} out of range for a {n}-layer model"));
    }
    Ok(site.layers.iter().copied().collect())
}

/// Requested anchors, or every anchor found in all of `sets`.
fn anchors(site: &SiteArgs, vocab: &Vocabulary, sets: &[&[Vec<u32>]]) -> CmdResult<BTreeSet<AnchorKind>> {
    if !site.anchors.is_empty() {
        return site.anchors.iter().map(|a| a.parse::<AnchorKind>().invalid()).collect();
    }
    let mut found: BTreeSet<AnchorKind> = AnchorKind::ALL.into_iter().collect();
    for p in sets.iter().flat_map(|s| s.iter()) {
        match locate_anchors(vocab, p) {
            Ok(a) => found.retain(|&k| a.resolve(k).is_ok()),
            Err(_) => found.clear(),
        }
    }
    if found.is_empty() {
        return invalid("no anchor resolves in every prompt; pass --anchor");
    }
    Ok(found)
}

fn stamp_vector(v: &SteeringVector, out: &Out, name: &str) -> CmdResult {
    let mut c = v.to_container();
    c.metadata.insert("seed".into(), out.meta.seed.into());
    c.metadata
        .insert("config_hash".into(), out.meta.config_hash.clone().into());
    let p = out.path(name);
    c.write(&p).with_context(|| format!("writing {}", p.display())).exec()
}

fn read_vector(path: &Path) -> CmdResult<SteeringVector> {
    SteeringVector::read(path)
        .with_context(|| format!("reading steering vector {}", path.display()))
        .invalid()
}

fn read_collection(path: &Path) -> CmdResult<CoupletCollection> {
    let c = CoupletCollection::read_jsonl(path)
        .with_context(|| format!("reading collection {}", path.display()))
        .invalid()?;
    if c.is_empty() {
        return invalid(format!("{} holds no records", path.display()));
    }
    Ok(c)
}

/// The single (source, target) pair a steered collection was generated for.
fn steered_pair(c: &CoupletCollection, path: &Path) -> CmdResult<(String, String)> {
    let mut pairs = BTreeSet::new();
    for r in &c.records {
        let Some(t) = &r.steered_toward else {
            return invalid(format!("{}: record `{}` was not steered", path.display(), r.prompt_id));
        };
        pairs.insert((r.category.clone(), t.clone()));
    }
    if pairs.len() != 1 {
        return invalid(format!("{} mixes {} steering pairs", path.display(), pairs.len()));
    }
    Ok(pairs.into_iter().next().expect("one pair"))
}

fn by_category(c: &CoupletCollection) -> Vec<(String, CoupletCollection)> {
    let mut v: Vec<(String, CoupletCollection)> = c
        .by_category()
        .into_iter()
        .map(|(cat, recs)| (cat, CoupletCollection::new(recs.into_iter().cloned().collect())))
        .collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

fn lexicons(dataset: &Dataset) -> CmdResult<LexiconIndex> {
    LexiconIndex::new(&dataset.categories).invalid()
}

pub fn dataset_validate(a: ValidateArgs) -> CmdResult {
    let dataset = load_dataset(&a.dataset)?;
    let out = Out::open("dataset validate", &a, &a.output)?;
    let violations = dataset.validate();
    let mut t = Table::new(vec!["severity", "path", "message"]);
    for v in &violations {
        let sev = match v.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        t.push(vec![sev.into(), v.path.clone(), v.message.clone()]);
    }
    out.table("violations", &t)?;
    let errors = violations.iter().filter(|v| v.severity == Severity::Error).count();
    eprintln!(
        "{}: {errors} error(s), {} warning(s)",
        dataset.name,
        violations.len() - errors
    );
    for v in &violations {
        eprintln!("  {:?} {}: {}", v.severity, v.path, v.message);
    }
    if errors > 0 {
        return invalid(format!(
            "dataset `{}` has {errors} error-level violation(s)",
            dataset.name
        ));
    }
    Ok(())
}

pub fn steer_estimate(a: EstimateArgs) -> CmdResult {
    let l = a.inputs.load(true)?;
    let (model, vocab, dataset) = (l.model()?, l.vocab()?, l.dataset()?);
    let out = Out::open("steer estimate", &a, &a.output)?;
    let mut t = Table::new(vec!["pair", "layer", "anchor", "norm", "file", "train_set_hash"]);
    for pair in resolve_pairs(dataset, &a.site.pairs)? {
        let pp = pair_prompts(vocab, dataset, &pair)?;
        let anchors = anchors(&a.site, vocab, &[&pp.source_train, &pp.target_train])?;
        for layer in layers(&a.site, model)? {
            for &anchor in &anchors {
                let v = pp.estimate(model, vocab, layer, anchor, a.site.multiplier).exec()?;
                let file = format!("vector_{}_l{layer}_{anchor}.plnl", slug(&pair.label()));
                stamp_vector(&v, &out, &file)?;
                t.push(vec![
                    pair.label(),
                    layer.to_string(),
                    anchor.to_string(),
                    f(v.norm()),
                    file,
                    v.train_set_hash.clone().unwrap_or_default(),
                ]);
            }
        }
    }
    out.table("vectors", &t)
}

fn evaluator<'a>(
    vocab: &'a Vocabulary,
    lex: &'a LexiconIndex,
    target: &'a str,
    test: &'a [Vec<u32>],
    config: RolloutConfig,
    samples: usize,
) -> RolloutEvaluator<'a, impl Fn(&[u32], &[u32]) -> bool + Sync + 'a> {
    RolloutEvaluator {
        vocab,
        test_prompts: test,
        config,
        samples,
        is_target: move |_: &[u32], completion: &[u32]| {
            vocab
                .decode(completion)
                .map(|text| lex.classify(planlab::corpus::first_line(&text)) == Some(target))
                .unwrap_or(false)
        },
    }
}

pub fn steer_sweep(a: SweepArgs) -> CmdResult {
    let l = a.inputs.load(true)?;
    let (model, vocab, dataset) = (l.model()?, l.vocab()?, l.dataset()?);
    let lex = lexicons(dataset)?;
    let out = Out::open("steer sweep", &a, &a.output)?;
    let config = rollout_config(&a.sampling, a.output.seed);
    let mut t = Table::new(vec!["pair", "layer", "anchor", "effectiveness", "best"]);
    let mut reports = Vec::new();
    for pair in resolve_pairs(dataset, &a.site.pairs)? {
        let pp = pair_prompts(vocab, dataset, &pair)?;
        let test = prompts(vocab, dataset, &pair.source, Split::Test)?;
        let anchors = anchors(&a.site, vocab, &[&pp.source_train, &pp.target_train, &test])?;
        let layers = layers(&a.site, model)?;
        let ev = evaluator(vocab, &lex, &pair.target, &test, config.clone(), a.rollouts);
        let result = sweep(model, vocab, &pp, &layers, &anchors, a.site.multiplier, &ev).exec()?;
        for c in result.cells() {
            let best = (c.layer, c.anchor) == result.best;
            t.push(vec![
                pair.label(),
                c.layer.to_string(),
                c.anchor.to_string(),
                f(c.effectiveness),
                best.to_string(),
            ]);
            reports.push(out.report(
                "sweep",
                &l.label,
                &format!("{} l{} {}", pair.label(), c.layer, c.anchor),
                "steering_effectiveness",
                c.effectiveness,
                test.len() * a.rollouts,
            ));
        }
        let (layer, anchor) = result.best;
        let best = pp.estimate(model, vocab, layer, anchor, a.site.multiplier).exec()?;
        stamp_vector(&best, &out, &format!("vector_{}.plnl", slug(&pair.label())))?;
        eprintln!(
            "{}: best layer {layer} {anchor} ({:.3})",
            pair.label(),
            result.best_effectiveness()
        );
    }
    out.table("sweep", &t)?;
    out.reports("sweep_metrics", &reports)
}

pub fn steer_curve(a: CurveArgs) -> CmdResult {
    let l = a.inputs.load(true)?;
    let (model, vocab, dataset) = (l.model()?, l.vocab()?, l.dataset()?);
    let lex = lexicons(dataset)?;
    if a.site.layers.len() != 1 || a.site.anchors.len() != 1 {
        return invalid("steer curve needs exactly one --layers value and one --anchor");
    }
    let layer = *layers(&a.site, model)?.iter().next().expect("one layer");
    let anchor: AnchorKind = a.site.anchors[0].parse().invalid()?;
    let out = Out::open("steer curve", &a, &a.output)?;
    let config = rollout_config(&a.sampling, a.output.seed);
    let mut t = Table::new(vec!["pair", "size", "mean_effectiveness", "runs"]);
    let mut reports = Vec::new();
    for pair in resolve_pairs(dataset, &a.site.pairs)? {
        let pp = pair_prompts(vocab, dataset, &pair)?;
        let test = prompts(vocab, dataset, &pair.source, Split::Test)?;
        let sizes = if a.sizes.is_empty() {
            doubling_sizes(pp.source_train.len().min(pp.target_train.len()))
        } else {
            a.sizes.clone()
        };
        let ev = evaluator(vocab, &lex, &pair.target, &test, config.clone(), a.rollouts);
        let points = train_size_curve(
            model,
            vocab,
            &pp,
            layer,
            anchor,
            a.site.multiplier,
            &sizes,
            a.repeats,
            a.output.seed,
            &ev,
        )
        .invalid()?;
        for p in points {
            let runs: Vec<String> = p.runs.iter().map(|r| f(*r)).collect();
            t.push(vec![
                pair.label(),
                p.size.to_string(),
                f(p.mean_effectiveness),
                runs.join(";"),
            ]);
            reports.push(out.report(
                "curve",
                &l.label,
                &format!("{} n{:04}", pair.label(), p.size),
                "steering_effectiveness",
                p.mean_effectiveness,
                p.runs.len() * test.len() * a.rollouts,
            ));
        }
    }
    out.table("curve", &t)?;
    out.reports("curve_metrics", &reports)
}

pub fn generate(a: GenerateArgs) -> CmdResult {
    let l = a.inputs.load(true)?;
    let (model, vocab, dataset) = (l.model()?, l.vocab()?, l.dataset()?);
    let split: Split = a.split.parse().invalid()?;
    let vector = a.vector.as_deref().map(read_vector).transpose()?;
    if let Some(v) = &vector {
        if v.values.len() != model.spec().model_dim {
            return invalid(format!(
                "vector has {} entries but the model width is {}",
                v.values.len(),
                model.spec().model_dim
            ));
        }
    }
    let categories: Vec<String> = match (&vector, a.categories.is_empty()) {
        (_, false) => a.categories.clone(),
        (Some(v), true) => vec![v.source_category.clone()],
        (None, true) => dataset.categories.iter().map(|c| c.id.clone()).collect(),
    };
    for c in &categories {
        dataset.category(c).invalid()?;
    }
    let out = Out::open("generate", &a, &a.output)?;
    let config = rollout_config(&a.sampling, a.output.seed);
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| if vector.is_some() { "steered" } else { "baseline" }.into());
    let mut all = CoupletCollection::default();
    let mut t = Table::new(vec!["category", "steered_toward", "records"]);
    for c in &categories {
        let coll = generate_collection(model, vocab, dataset, c, split, a.samples, &config, vector.as_ref()).exec()?;
        t.push(vec![
            c.clone(),
            vector.as_ref().map(|v| v.target_category.clone()).unwrap_or_default(),
            coll.len().to_string(),
        ]);
        all.records.extend(coll.records);
    }
    let path = out.path(&format!("{name}.jsonl"));
    all.write_jsonl(&path)
        .with_context(|| format!("writing {}", path.display()))
        .exec()?;
    out.table(&format!("{name}_summary"), &t)
}

/// Model label and dataset for commands that only read collections.
fn eval_inputs(a: &EvalArgs) -> CmdResult<Loaded> {
    a.inputs.load(false)
}

pub fn eval_rhyme(a: EvalArgs) -> CmdResult {
    let l = eval_inputs(&a)?;
    let lex = lexicons(l.dataset()?)?;
    let baseline = read_collection(&a.baseline)?;
    let steered: Vec<_> = a.steered.iter().map(|p| read_collection(p)).collect::<CmdResult<_>>()?;
    let out = Out::open("eval rhyme", &a, &a.output)?;
    let mut reports = Vec::new();
    let mut hits = 0.0;
    for (cat, coll) in by_category(&baseline) {
        let v = fraction_correct_rhyme_family(&coll, &cat, &lex).exec()?;
        hits += v * coll.len() as f64;
        reports.push(out.report("rhyme", &l.label, &cat, "fraction_correct_rhyme_family", v, coll.len()));
    }
    let overall = hits / baseline.len() as f64;
    reports.push(out.report(
        "rhyme",
        &l.label,
        "all",
        "fraction_correct_rhyme_family",
        overall,
        baseline.len(),
    ));
    let mut t = Table::new(vec![
        "model",
        "pair",
        "baseline_fraction",
        "steered_fraction",
        "records",
    ]);
    for (coll, path) in steered.iter().zip(&a.steered) {
        let (src, tgt) = steered_pair(coll, path)?;
        let label = format!("{src}->{tgt}");
        let v = fraction_correct_steered(coll, &lex).exec()?;
        reports.push(out.report(
            "rhyme",
            &l.label,
            &label,
            "fraction_correct_rhyme_family_steered",
            v,
            coll.len(),
        ));
        t.push(vec![l.label.clone(), label, f(overall), f(v), coll.len().to_string()]);
    }
    if !steered.is_empty() {
        out.table("rhyme", &t)?;
    }
    out.reports("rhyme_metrics", &reports)
}

pub fn eval_regen(a: RegenArgs) -> CmdResult {
    let l = a.eval.inputs.load(true)?;
    let (model, vocab) = (l.model()?, l.vocab()?);
    let lex = lexicons(l.dataset()?)?;
    let baseline = read_collection(&a.eval.baseline)?;
    let steered: Vec<_> = a
        .eval
        .steered
        .iter()
        .map(|p| read_collection(p))
        .collect::<CmdResult<_>>()?;
    let out = Out::open("eval regen", &a, &a.eval.output)?;
    let opts = RegenerationOptions {
        samples_per_line: a.samples_per_line,
        prefix: a.prefix.clone(),
        config: rollout_config(&a.sampling, a.eval.output.seed),
    };
    let base = regeneration_rate(model, vocab, &baseline, &lex, &opts).exec()?;
    let chance = regeneration_chance_baseline(&base).exec()?;
    let mut reports = vec![out.report(
        "regen",
        &l.label,
        "all",
        "fraction_correct_regeneration",
        base.rate().exec()?,
        base.total,
    )];
    let mut steered_by_target: BTreeMap<String, RegenerationOutcome> = BTreeMap::new();
    for (coll, path) in steered.iter().zip(&a.eval.steered) {
        let (src, tgt) = steered_pair(coll, path)?;
        let o = regeneration_rate(model, vocab, coll, &lex, &opts).exec()?;
        reports.push(out.report(
            "regen",
            &l.label,
            &format!("{src}->{tgt}"),
            "fraction_correct_regeneration_steered",
            o.rate().exec()?,
            o.total,
        ));
        steered_by_target.entry(tgt).or_default().merge(&o);
    }
    let mut t = Table::new(vec![
        "model",
        "family",
        "baseline_rate",
        "steered_rate",
        "chance_baseline",
    ]);
    for fam in base.families() {
        let rate = base.cross_rate(fam, fam).unwrap_or(0.0);
        let n: usize = base.counts.iter().filter(|((w, _), _)| w == fam).map(|(_, n)| n).sum();
        reports.push(out.report("regen", &l.label, fam, "fraction_correct_regeneration", rate, n));
        reports.push(out.report("regen", &l.label, fam, "regeneration_chance_baseline", chance[fam], n));
        let steered_rate = steered_by_target.get(fam).map(|o| o.rate()).transpose().exec()?;
        t.push(vec![
            l.label.clone(),
            fam.to_string(),
            f(rate),
            steered_rate.map(f).unwrap_or_default(),
            f(chance[fam]),
        ]);
    }
    out.table("regen", &t)?;
    out.reports("regen_metrics", &reports)
}

pub fn eval_qa(a: EvalArgs) -> CmdResult {
    let l = eval_inputs(&a)?;
    let baseline = read_collection(&a.baseline)?;
    let steered: Vec<_> = a.steered.iter().map(|p| read_collection(p)).collect::<CmdResult<_>>()?;
    let out = Out::open("eval qa", &a, &a.output)?;
    let mut reports = Vec::new();
    let mut t = Table::new(vec![
        "model",
        "group",
        "steered",
        "fraction_correct_answer",
        "fraction_a",
        "fraction_an",
    ]);
    for (cat, coll) in by_category(&baseline) {
        let q = qa_fractions(&coll, &cat).exec()?;
        for (m, v) in [
            ("fraction_correct_answer", q.correct_answer),
            ("fraction_a", q.a),
            ("fraction_an", q.an),
        ] {
            reports.push(out.report("qa", &l.label, &cat, m, v, coll.len()));
        }
        t.push(vec![
            l.label.clone(),
            cat,
            "false".into(),
            f(q.correct_answer),
            f(q.a),
            f(q.an),
        ]);
    }
    for (coll, path) in steered.iter().zip(&a.steered) {
        let (src, tgt) = steered_pair(coll, path)?;
        let label = format!("{src}->{tgt}");
        let q = qa_fractions_expected(coll).exec()?;
        for (m, v) in [
            ("fraction_correct_answer_steered", q.correct_answer),
            ("fraction_a_steered", q.a),
            ("fraction_an_steered", q.an),
        ] {
            reports.push(out.report("qa", &l.label, &label, m, v, coll.len()));
        }
        t.push(vec![
            l.label.clone(),
            label,
            "true".into(),
            f(q.correct_answer),
            f(q.a),
            f(q.an),
        ]);
    }
    out.table("qa", &t)?;
    out.reports("qa_metrics", &reports)
}

pub fn eval_prob(a: ProbArgs) -> CmdResult {
    let l = a.inputs.load(true)?;
    let (model, vocab) = (l.model()?, l.vocab()?);
    let baseline = read_collection(&a.baseline)?;
    let vectors: Vec<_> = a.vectors.iter().map(|p| read_vector(p)).collect::<CmdResult<_>>()?;
    let out = Out::open("eval prob", &a, &a.output)?;
    let mut reports = Vec::new();
    let mut t = Table::new(vec![
        "model",
        "pair",
        "fraction_top1_difference",
        "fraction_high_kl",
        "tokens_after_first_top1_difference",
        "tokens_after_first_high_kl",
        "records",
    ]);
    for v in &vectors {
        let records: Vec<_> = baseline
            .records
            .iter()
            .filter(|r| r.category == v.source_category && r.steered_toward.is_none())
            .collect();
        if records.is_empty() {
            return invalid(format!(
                "baseline has no unsteered `{}` records for vector {}->{}",
                v.source_category, v.source_category, v.target_category
            ));
        }
        let divs: Vec<_> = records
            .par_iter()
            .map(|r| trace_pair(model, vocab, r, v).and_then(|p| p.divergence()))
            .collect::<planlab::Result<_>>()
            .exec()?;
        let label = format!("{}->{}", v.source_category, v.target_category);
        let values = [
            ("fraction_top1_difference", fraction_top1_difference(&divs).exec()?),
            ("fraction_high_kl", fraction_high_kl(&divs).exec()?),
            (
                "tokens_after_first_top1_difference",
                tokens_after_first(&divs, Criterion::Top1Diff).exec()?,
            ),
            (
                "tokens_after_first_high_kl",
                tokens_after_first(&divs, Criterion::HighKl).exec()?,
            ),
        ];
        let mut row = vec![l.label.clone(), label.clone()];
        for (m, x) in values {
            reports.push(out.report("prob", &l.label, &label, m, x, divs.len()));
            row.push(f(x));
        }
        row.push(divs.len().to_string());
        t.push(row);
    }
    out.table("prob", &t)?;
    out.reports("prob_metrics", &reports)
}

/// Single-token ids for the logit difference, defaulting to the planted
/// markers of the vector's target and source.
fn probe_tokens(
    probe: &ProbeArgs,
    l: &Loaded,
    vocab: &Vocabulary,
    target_category: &str,
    source_category: &str,
) -> CmdResult<(u32, u32)> {
    let one = |s: &str| -> CmdResult<u32> {
        match vocab.encode(s).as_slice() {
            [id] => Ok(*id),
            ids => invalid(format!("{s:?} encodes to {} tokens, expected one", ids.len())),
        }
    };
    match (&probe.target_token, &probe.source_token, &l.truth) {
        (Some(t), Some(s), _) => Ok((one(t)?, one(s)?)),
        (None, None, Some(truth)) => {
            let m = truth.tokens.markers;
            Ok((
                m[truth.side_of(target_category).invalid()?],
                m[truth.side_of(source_category).invalid()?],
            ))
        }
        _ => invalid("pass both --target-token and --source-token"),
    }
}

pub fn circuit_patch(a: PatchArgs) -> CmdResult {
    let l = a.inputs.load(true)?;
    let (model, vocab, dataset) = (l.model()?, l.vocab()?, l.dataset()?);
    let v = read_vector(&a.vector)?;
    let (target, source) = probe_tokens(&a.probe, &l, vocab, &v.target_category, &v.source_category)?;
    let out = Out::open("circuit patch", &a, &a.output)?;
    let test = prompts(vocab, dataset, &v.source_category, Split::Test)?;
    let test = &test[..a.probe.prompts.min(test.len())];
    if test.is_empty() {
        return invalid("no test prompts to patch");
    }
    let heads = all_heads(model);
    let per_prompt: Vec<_> = test
        .par_iter()
        .map(|p| {
            let anchors = locate_anchors(vocab, p)?;
            let plan = steering_plan(&v, &anchors, v.anchor_kind)?;
            head_patch_recoveries(model, p, &plan, &heads, target, source)
        })
        .collect::<planlab::Result<_>>()
        .exec()?;
    let mut acc: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for recs in &per_prompt {
        for r in recs {
            acc.entry((r.layer, r.head)).or_default().push(r.recovery_percent);
        }
    }
    let mut t = Table::new(vec!["layer", "head", "mean_recovery_percent", "min", "max", "prompts"]);
    let mut reports = Vec::new();
    for ((layer, head), xs) in &acc {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        t.push(vec![
            layer.to_string(),
            head.to_string(),
            f(mean),
            f(lo),
            f(hi),
            xs.len().to_string(),
        ]);
        reports.push(out.report(
            "patch",
            &l.label,
            &format!("l{layer}h{head}"),
            "recovery_percent",
            mean,
            xs.len(),
        ));
    }
    out.table("patch", &t)?;
    out.reports("patch_metrics", &reports)
}

pub fn circuit_ablate(a: AblateArgs) -> CmdResult {
    let l = a.inputs.load(true)?;
    let (model, vocab, dataset) = (l.model()?, l.vocab()?, l.dataset()?);
    let v = a.vector.as_deref().map(read_vector).transpose()?;
    let kinds: BTreeSet<AnchorKind> = a
        .anchors
        .iter()
        .map(|s| s.parse().invalid())
        .collect::<CmdResult<_>>()?;
    let (source_cat, target_cat) = match (&v, &a.category) {
        (Some(v), _) => (v.source_category.clone(), v.target_category.clone()),
        (None, Some(c)) => {
            let other = dataset
                .pairs
                .iter()
                .find(|p| &p.source == c)
                .map(|p| p.target.clone())
                .unwrap_or_else(|| c.clone());
            (c.clone(), other)
        }
        (None, None) => return invalid("pass --vector or --category"),
    };
    let (target, source) = match (&v, &l.truth) {
        // Unsteered planted probe: the category's own marker against the other.
        (None, Some(_)) if a.probe.target_token.is_none() => {
            probe_tokens(&a.probe, &l, vocab, &source_cat, &target_cat)?
        }
        _ => probe_tokens(&a.probe, &l, vocab, &target_cat, &source_cat)?,
    };
    let out = Out::open("circuit ablate", &a, &a.output)?;
    let test = prompts(vocab, dataset, &source_cat, Split::Test)?;
    let test = &test[..a.probe.prompts.min(test.len())];
    if test.is_empty() {
        return invalid("no test prompts to ablate");
    }
    let outcomes: Vec<_> = test
        .par_iter()
        .map(|p| {
            let anchors = locate_anchors(vocab, p)?;
            let blocked = kinds
                .iter()
                .map(|&k| anchors.resolve(k))
                .collect::<planlab::Result<BTreeSet<_>>>()?;
            let plan = v
                .as_ref()
                .map(|v| steering_plan(v, &anchors, v.anchor_kind))
                .transpose()?;
            ablation_effect(model, p, plan.as_ref(), blocked, &[target], &[source])
        })
        .collect::<planlab::Result<_>>()
        .exec()?;
    let group: Vec<&str> = kinds.iter().map(|k| k.as_str()).collect();
    let group = group.join("+");
    let mut t = Table::new(vec!["prompt", "blocked", "before", "after"]);
    for (i, o) in outcomes.iter().enumerate() {
        let blocked: Vec<String> = o.blocked.iter().map(|b| b.to_string()).collect();
        t.push(vec![
            format!("{source_cat}/test/{i}"),
            blocked.join(";"),
            f(o.before),
            f(o.after),
        ]);
    }
    let n = outcomes.len();
    let before = outcomes.iter().map(|o| o.before).sum::<f64>() / n as f64;
    let after = outcomes.iter().map(|o| o.after).sum::<f64>() / n as f64;
    let reports = vec![
        out.report("ablate", &l.label, &group, "target_share_before", before, n),
        out.report("ablate", &l.label, &group, "target_share_after", after, n),
    ];
    out.table("ablate", &t)?;
    out.reports("ablate_metrics", &reports)
}

#[derive(Deserialize)]
struct ReportFile {
    reports: Vec<MetricReport>,
}

pub fn report_correlations(a: CorrelationArgs) -> CmdResult {
    let grouping = match a.grouping.as_str() {
        "per_prompt" => Grouping::PerPrompt,
        "per_model" => Grouping::PerModel,
        other => return invalid(format!("unknown grouping `{other}` (per_prompt or per_model)")),
    };
    let mut reports = Vec::new();
    for p in &a.inputs {
        let text = std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .invalid()?;
        let file: ReportFile = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a JSON metric report", p.display()))
            .invalid()?;
        reports.extend(file.reports);
    }
    let m = correlation_report(&reports, grouping).invalid()?;
    let out = Out::open("report correlations", &a, &a.output)?;
    out.write("correlations.csv", &render_matrix_csv(&m, &out.meta))?;
    out.write_json(
        "correlations.json",
        &serde_json::json!({ "seed": out.meta.seed, "config_hash": out.meta.config_hash, "matrix": m }),
    )?;
    Ok(())
}

pub fn tokens_stats(a: TokenStatsArgs) -> CmdResult {
    let l = a.inputs.load(a.inputs.model.is_some())?;
    let (vocab, dataset) = (l.vocab()?, l.dataset()?);
    let embeddings = l.model.as_ref().and_then(|m| m.weights().try_get("tok_embed"));
    let stats = token_stats(vocab, &dataset.categories, embeddings).exec()?;
    let out = Out::open("tokens stats", &a, &a.output)?;
    let mut t = Table::new(vec!["category", "words", "single_token_bare", "single_token_spaced"]);
    for c in &stats.per_category {
        let s = &c.single_token;
        t.push(vec![c.category.clone(), s.words.to_string(), f(s.bare), f(s.spaced)]);
    }
    let o = &stats.overall;
    t.push(vec!["all".into(), o.words.to_string(), f(o.bare), f(o.spaced)]);
    out.table("tokens", &t)?;
    if let Some(c) = &stats.cosine {
        let mut ct = Table::new(vec!["within_family", "across_families"]);
        ct.push(vec![f(c.within_family), f(c.across_families)]);
        out.table("token_cosine", &ct)?;
    }
    Ok(())
}

pub fn selftest_planted(a: SelftestArgs) -> CmdResult {
    let names: Vec<&str> = if a.world == "all" {
        WORLD_NAMES.iter().copied().filter(|&n| n != "control").collect()
    } else {
        vec![a.world.as_str()]
    };
    let worlds = names
        .iter()
        .map(|n| world(n).invalid())
        .collect::<CmdResult<Vec<_>>>()?;
    let out = Out::open("selftest planted", &a, &a.output)?;
    let config = SelfTestConfig {
        seed: a.output.seed,
        samples: a.samples,
        ..SelfTestConfig::default()
    };
    let mut failed = Vec::new();
    let mut summary = Table::new(vec!["world", "checks", "failed"]);
    for w in &worlds {
        let r = self_test(w, &config).exec()?;
        out.write(&format!("selftest_{}.csv", w.name), &r.to_csv())?;
        out.write(&format!("selftest_{}.json", w.name), &(r.to_json().exec()? + "\n"))?;
        let bad: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        for c in &r.checks {
            eprintln!("{} {:<40} {}", w.name, c.name, if c.passed { "pass" } else { "FAIL" });
        }
        summary.push(vec![w.name.clone(), r.checks.len().to_string(), bad.join(";")]);
        failed.extend(bad.iter().map(|b| format!("{}/{b}", w.name)));
    }
    out.table("selftest_summary", &summary)?;
    if !failed.is_empty() {
        return invalid(format!("self-test checks failed: {}", failed.join(", ")));
    }
    Ok(())
}

pub fn planted_build(a: PlantedBuildArgs) -> CmdResult {
    let w = world(&a.world).invalid()?;
    let built = w.build().exec()?;
    let out = Out::open("planted build", &a, &a.output)?;
    let mut c = built.model.weights().to_container(built.model.spec());
    c.metadata.insert("world".into(), w.name.clone().into());
    c.metadata
        .insert("config_hash".into(), out.meta.config_hash.clone().into());
    let p = out.path("model.plnl");
    c.write(&p).with_context(|| format!("writing {}", p.display())).exec()?;
    w.vocab.write_dir(&out.dir).exec()?;
    w.dataset.save(out.path("dataset.json")).exec()?;
    out.write("ground_truth.json", &(built.truth.to_json().exec()? + "\n"))?;
    Ok(())
}
