use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokenfusion")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Last stdout line, which every reporting command prints as JSON.
fn json_line(o: &Output) -> Value {
    serde_json::from_str(stdout(o).lines().last().expect("output")).expect("json line")
}

const SMALL: [&str; 8] = [
    "--set", "model.fusion_method=late_parallel",
    "--set", "dataset.train=8",
    "--set", "dataset.val=6",
    "--set", "optim.epochs=2",
];

fn train(out: &Path, seed: &str) -> Output {
    let mut args = vec!["train", "--seed", seed, "--out", out.to_str().unwrap(), "--set", "optim.batch_size=4"];
    args.extend(SMALL);
    run(&args)
}

#[test]
fn training_is_reproducible_and_eval_matches_last_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train(out, "7");
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let metrics = std::fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics, std::fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(std::fs::read(a.join("weights.bin")).unwrap(), std::fs::read(b.join("weights.bin")).unwrap());
    assert!(a.join("timing.jsonl").exists());

    let text = String::from_utf8(metrics).unwrap();
    assert_eq!(text.lines().count(), 2);
    let last: Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();

    let cfg = a.join("resolved_config.json");
    let w = a.join("weights.bin");
    let o = run(&["eval", "--config", cfg.to_str().unwrap(), "--weights", w.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e = json_line(&o);
    assert_eq!(e["acc1"], last["val_acc1"]);
    assert_eq!(e["acc5"], last["val_acc5"]);
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--out", dir.path().to_str().unwrap(), "--dataset", dir.path().join("absent").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"model": {"fusion": "late"}}"#).unwrap();
    assert_eq!(run(&["params", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(run(&["params", "--set", "model.dim=-3"]).status.code(), Some(1));
    assert_eq!(run(&["params", "--set", "model.heads=5"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--set", "optim.lr=-1"]).status.code(), Some(1));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
}

#[test]
fn wrong_weights_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("late");
    assert!(train(&out, "1").status.success());
    let w = out.join("weights.bin");
    // Same run, different architecture.
    let o = run(&["eval", "--set", "model.fusion_method=early_fusion", "--set", "dataset.val=6", "--weights", w.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not weights").unwrap();
    let cfg = out.join("resolved_config.json");
    let o = run(&["eval", "--config", cfg.to_str().unwrap(), "--weights", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let base = ["gradcheck", "--set", "model.fusion_method=late_parallel", "--set", "model.head_type=mixing"];
    let ok = run(&base);
    assert!(ok.status.success(), "{}{}", stdout(&ok), String::from_utf8_lossy(&ok.stderr));
    let report = json_line(&ok);
    assert_eq!(report["checked"], 100);
    assert_eq!(report["pass"], true);

    let mut faulty = base.to_vec();
    faulty.push("--inject-fault");
    let bad = run(&faulty);
    assert_eq!(bad.status.code(), Some(3));
    assert_eq!(json_line(&bad)["pass"], false);
}

#[test]
fn params_reports_totals_and_millions() {
    let o = run(&["params", "--set", "model.fusion_method=late_parallel", "--set", "model.head_type=token_wise"]);
    assert!(o.status.success());
    let r = json_line(&o);
    let total = r["total"].as_u64().unwrap();
    let per_module: u64 = r["per_module"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(per_module, total);
    assert_eq!(r["total_millions"], format!("{:.1}M", total as f64 / 1e6));
    assert!(stdout(&o).contains("backbone"));
}

#[test]
fn list_variants_names_all_sixteen() {
    let o = run(&["list-variants", "--json"]);
    assert!(o.status.success());
    let items = json_line(&o);
    let items = items.as_array().unwrap();
    assert_eq!(items.len(), 16);
    assert_eq!(items.iter().filter(|v| v["group"] == "basic").count(), 9);
    let plain = run(&["list-variants"]);
    assert_eq!(stdout(&plain).lines().count(), 16);
}

#[test]
fn shipped_configs_resolve_and_build() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let o = run(&["params", "--config", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&o.stderr));
        seen += 1;
    }
    assert!(seen >= 10);
}
