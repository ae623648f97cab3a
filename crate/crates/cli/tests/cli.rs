// SPDX-License-Identifier: MIT OR Apache-2.0

use std::process::{Command, Output};

fn planlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planlab"))
        .args(args)
        .output()
        .expect("spawn planlab")
}

#[test]
fn bundled_datasets_validate() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["rhyme", "qa"] {
        let out = tmp.path().join(name);
        let o = planlab(&[
            "dataset",
            "validate",
            "--dataset",
            &format!("bundled:{name}"),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("manifest.json").exists());
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let missing = planlab(&[
        "steer",
        "sweep",
        "--model",
        "/nonexistent.plnl",
        "--vocab",
        out,
        "--out",
        out,
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let unknown_world = planlab(&["steer", "sweep", "--model", "planted:nope", "--out", out]);
    assert_eq!(unknown_world.status.code(), Some(1));
    let bad_flag = planlab(&["steer", "sweep", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));
}

#[test]
fn planted_build_round_trips_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("w");
    let d = dir.to_str().unwrap();
    let o = planlab(&["planted", "build", "--world", "micro_rhyme", "--out", d]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model = dir.join("model.plnl");
    let dataset = dir.join("dataset.json");
    let stats = tmp.path().join("stats");
    let o = planlab(&[
        "tokens",
        "stats",
        "--model",
        model.to_str().unwrap(),
        "--vocab",
        d,
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        stats.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stats.join("tokens.csv").exists());
}
