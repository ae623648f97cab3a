// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance run: one line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use planlab::intervene::patch_recovery_rounded;
use planlab::metrics::{
    fraction_high_kl, fraction_top1_difference, kl_divergence, tokens_after_first, Criterion, PositionDivergence,
};
use planlab::planted::{self_test_sections, world, Section, SelfTestConfig, SelfTestReport};
use planlab::runtime::NextTokenDistribution;
use planlab::steer::{estimate_steering_vector, mean_difference, VectorLabel};
use planlab::text::AnchorKind;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn patch_recovery() -> Outcome {
    let cases = [
        ((-2.6, 4.61, 5.48), 89),
        ((-3.37, 1.47, 4.77), 59),
        ((-14.5, 2.06, 3.39), 93),
        ((-4.94, -1.07, 0.93), 66),
    ];
    for ((u, p, s), want) in cases {
        let got = patch_recovery_rounded(u, p, s).map_err(|e| e.to_string())?;
        ensure(got == want, format!("({u}, {p}, {s}) gave {got}, want {want}"))?;
    }
    Ok(format!("{} reference rows", cases.len()))
}

fn random_acts(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    let scale = 10f32.powi(rng.gen_range(-3..4));
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect())
        .collect()
}

fn negation_bitwise(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.to_bits() == (-y).to_bits() || (*x == 0.0 && *y == 0.0))
}

fn steering_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let label = |s: &str, t: &str| VectorLabel {
        layer: 0,
        anchor_kind: AnchorKind::Newline,
        source_category: s.into(),
        target_category: t.into(),
    };
    for case in 0..100 {
        let dim = rng.gen_range(1..96);
        let na = rng.gen_range(1..24);
        let a = random_acts(&mut rng, na, dim);
        let nb = rng.gen_range(1..24);
        let b = random_acts(&mut rng, nb, dim);
        let ab = mean_difference(&a, &b).map_err(|e| e.to_string())?;
        let ba = mean_difference(&b, &a).map_err(|e| e.to_string())?;
        ensure(negation_bitwise(&ab, &ba), format!("case {case}: A->B != -(B->A)"))?;

        let v = estimate_steering_vector(&a, &b, 1.5, label("a", "b")).map_err(|e| e.to_string())?;
        let (mut a2, mut b2) = (a.clone(), b.clone());
        a2.shuffle(&mut rng);
        b2.shuffle(&mut rng);
        let w = estimate_steering_vector(&a2, &b2, 1.5, label("a", "b")).map_err(|e| e.to_string())?;
        let same = v.values.iter().zip(&w.values).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, format!("case {case}: shuffled train order changed the vector"))?;
    }
    Ok("100 random activation sets".into())
}

fn run_sections(world_name: &str, sections: &[Section]) -> Result<SelfTestReport, String> {
    let w = world(world_name).map_err(|e| e.to_string())?;
    self_test_sections(&w, &SelfTestConfig::default(), sections).map_err(|e| e.to_string())
}

fn summarize(reports: &[SelfTestReport]) -> Outcome {
    let mut notes = Vec::new();
    let mut failed = Vec::new();
    for r in reports {
        for c in &r.checks {
            let value = if c.value != 0.0 && c.value.abs() < 1e-3 {
                format!("{:.2e}", c.value)
            } else {
                format!("{:.4}", c.value)
            };
            let line = format!("{}/{}={value}", r.world, c.name);
            if c.passed {
                if c.detail.is_empty() || c.detail.len() > 80 {
                    notes.push(line);
                } else {
                    notes.push(format!("{line} ({})", c.detail));
                }
            } else {
                failed.push(format!("{line} (expect {}; {})", c.expect, c.detail));
            }
        }
    }
    if failed.is_empty() {
        Ok(notes.join(" "))
    } else {
        Err(failed.join("; "))
    }
}

fn oracle() -> Outcome {
    summarize(&[run_sections("synthetic", &[Section::Oracle])?])
}

fn forward_single_thread() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let report = pool.install(|| run_sections("synthetic", &[Section::Forward]))?;
    summarize(&[report])
}

fn backward() -> Outcome {
    let mut reports = Vec::new();
    for w in ["micro_rhyme", "synthetic"] {
        reports.push(run_sections(w, &[Section::Backward])?);
    }
    summarize(&reports)
}

fn circuit() -> Outcome {
    summarize(&[run_sections("synthetic", &[Section::Circuit])?])
}

/// One position per character: `H` high KL with top-1 change, `K` high KL,
/// `T` top-1 change only, `.` neither, `E` KL of exactly 1.
fn positions(code: &str) -> PositionDivergence {
    let mut p = PositionDivergence::default();
    for c in code.chars() {
        let (kl, t1) = match c {
            'H' => (2.0, true),
            'K' => (1.5, false),
            'T' => (0.5, true),
            '.' => (0.1, false),
            'E' => (1.0, false),
            _ => panic!("bad fixture code {c}"),
        };
        p.kl.push(kl);
        p.top1_differs.push(t1);
    }
    p
}

fn kl_and_fractions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..200);
        let lp: Vec<f32> = (0..n).map(|_| rng.gen_range(-8.0f32..8.0)).collect();
        let lq: Vec<f32> = (0..n).map(|_| rng.gen_range(-8.0f32..8.0)).collect();
        let mut p = NextTokenDistribution::from_logits(&lp);
        let q = NextTokenDistribution::from_logits(&lq);
        if rng.gen_bool(0.3) {
            // Zero out some of p and renormalize.
            for x in p.probs.iter_mut().skip(1).step_by(3) {
                *x = 0.0;
            }
            let z: f64 = p.probs.iter().sum();
            p.probs.iter_mut().for_each(|x| *x /= z);
        }
        let got = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
        let direct: f64 = p
            .probs
            .iter()
            .zip(&q.probs)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| a * a.ln() - a * b.ln())
            .sum();
        worst = worst.max((got - direct.max(0.0)).abs());
    }
    ensure(worst <= 1e-9, format!("kl differs from the direct sum by {worst:e}"))?;

    let fixtures: [(&[&str], [f64; 4]); 20] = [
        (&["H"], [1.0, 1.0, 1.0, 1.0]),
        (&["."], [0.0, 0.0, 0.0, 0.0]),
        (&["E"], [0.0, 0.0, 0.0, 0.0]),
        (&["T."], [0.0, 0.5, 1.0, 0.0]),
        (&[".K"], [0.5, 0.0, 0.0, 0.5]),
        (&["..HK"], [0.5, 0.25, 0.5, 0.5]),
        (&["KTKT"], [0.5, 0.5, 0.75, 1.0]),
        (&["E..."], [0.0, 0.0, 0.0, 0.0]),
        (&["...T"], [0.0, 0.25, 0.25, 0.0]),
        (&["HHHHHHHH"], [1.0, 1.0, 1.0, 1.0]),
        (&[".......K"], [0.125, 0.0, 0.0, 0.125]),
        (&["T......."], [0.0, 0.125, 1.0, 0.0]),
        (&["..K.T..E"], [0.125, 0.125, 0.5, 0.75]),
        (&["H", "."], [0.5, 0.5, 0.5, 0.5]),
        (&["T.", ".K"], [0.25, 0.25, 0.5, 0.25]),
        (&["..HK", "E..."], [0.25, 0.125, 0.25, 0.25]),
        (&["H", "T.", "..K.", "KKKKKKKK"], [0.5625, 0.375, 0.5, 0.625]),
        (&["E", "E", "E", "E"], [0.0, 0.0, 0.0, 0.0]),
        (&["...T", "KTKT"], [0.25, 0.375, 0.5, 0.5]),
        (&["HT", ".H", "K.", "T."], [0.375, 0.5, 0.625, 0.625]),
    ];
    for (i, (codes, want)) in fixtures.iter().enumerate() {
        let recs: Vec<PositionDivergence> = codes.iter().map(|c| positions(c)).collect();
        let got = [
            fraction_high_kl(&recs),
            fraction_top1_difference(&recs),
            tokens_after_first(&recs, Criterion::Top1Diff),
            tokens_after_first(&recs, Criterion::HighKl),
        ]
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| e.to_string())?;
        ensure(
            got == want,
            format!("fixture {} {codes:?}: got {got:?}, want {want:?}", i + 1),
        )?;
    }
    Ok(format!(
        "1000 random pairs (worst {worst:.1e}), {} fixtures",
        fixtures.len()
    ))
}

fn planlab(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_planlab"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "planlab {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        let body = std::fs::read(e.path()).map_err(|e| e.to_string())?;
        files.push((e.file_name().to_string_lossy().into_owned(), body));
    }
    files.sort();
    Ok(files)
}

fn selftest_deterministic() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (d1, d2) = (tmp.path().join("d1"), tmp.path().join("d2"));
    for d in [&d1, &d2] {
        planlab(&["selftest", "planted", "--out", &d.to_string_lossy()])?;
    }
    let (a, b) = (read_dir_sorted(&d1)?, read_dir_sorted(&d2)?);
    ensure(!a.is_empty(), "no output files")?;
    ensure(
        a.iter().map(|f| &f.0).eq(b.iter().map(|f| &f.0)),
        "runs wrote different file sets",
    )?;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        ensure(x == y, format!("{name} differs between runs"))?;
    }
    Ok(format!("{} files identical, exit 0", a.len()))
}

fn micro_pipeline() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let m = "planted:micro_rhyme";
    let vector = format!("{}/vector_ight-ake.plnl", d("sweep"));
    let (base, steered) = (
        format!("{}/baseline.jsonl", d("gen")),
        format!("{}/steered.jsonl", d("gen")),
    );
    planlab(&["steer", "sweep", "--model", m, "--out", &d("sweep")])?;
    planlab(&["generate", "--model", m, "--name", "baseline", "--out", &d("gen")])?;
    planlab(&[
        "generate",
        "--model",
        m,
        "--category=-ight",
        "--vector",
        &vector,
        "--name",
        "steered",
        "--out",
        &d("gen"),
    ])?;
    for (cmd, dir) in [("rhyme", "rhyme"), ("regen", "regen")] {
        planlab(&[
            "eval",
            cmd,
            "--model",
            m,
            "--baseline",
            &base,
            "--steered",
            &steered,
            "--out",
            &d(dir),
        ])?;
    }
    planlab(&[
        "eval",
        "prob",
        "--model",
        m,
        "--baseline",
        &base,
        "--vector",
        &vector,
        "--out",
        &d("prob"),
    ])?;

    let mut metrics = String::new();
    for (dir, stem) in [
        ("rhyme", "rhyme_metrics"),
        ("regen", "regen_metrics"),
        ("prob", "prob_metrics"),
    ] {
        let p = tmp.path().join(dir).join(format!("{stem}.csv"));
        metrics.push_str(&std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?);
    }
    let columns: Vec<&str> = metrics.lines().filter_map(|l| l.split(',').nth(3)).collect();
    let want = [
        "fraction_correct_rhyme_family",
        "fraction_correct_rhyme_family_steered",
        "fraction_correct_regeneration",
        "fraction_correct_regeneration_steered",
        "fraction_top1_difference",
        "fraction_high_kl",
        "tokens_after_first_top1_difference",
        "tokens_after_first_high_kl",
    ];
    let missing: Vec<&str> = want.iter().copied().filter(|w| !columns.contains(w)).collect();
    ensure(missing.is_empty(), format!("missing metrics: {missing:?}"))?;
    Ok(format!("{} metrics present", want.len()))
}

type Row = (&'static str, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Row; 9] = [
        (
            "1",
            "patch recovery reference rows",
            Duration::from_millis(1),
            patch_recovery,
        ),
        (
            "2",
            "steering vector negation and order invariance",
            Duration::from_secs(1),
            steering_symmetry,
        ),
        (
            "3",
            "runtime matches the reference evaluator",
            Duration::from_secs(10),
            oracle,
        ),
        (
            "4",
            "forward steering on one thread",
            Duration::from_secs(60),
            forward_single_thread,
        ),
        ("5", "marker flips and regeneration", Duration::from_secs(60), backward),
        ("6", "head patching and ablation", Duration::from_secs(30), circuit),
        ("7", "KL and trace fractions", Duration::from_secs(5), kl_and_fractions),
        (
            "8",
            "self-test is deterministic",
            Duration::from_secs(120),
            selftest_deterministic,
        ),
        ("9", "micro pipeline metrics", Duration::from_secs(60), micro_pipeline),
    ];
    let mut failures = 0;
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (status, note) = match outcome {
            Ok(_) if took > budget => ("FAIL", format!("took {took:.3?}, budget {budget:?}")),
            Ok(n) => ("PASS", n),
            Err(e) => ("FAIL", e),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("criterion {id} {status} {name} [{took:.3?}] {note}");
    }
    println!("{} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
