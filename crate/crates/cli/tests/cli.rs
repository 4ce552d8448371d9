use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn simnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("SIMNET_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = simnet(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["--classes", "4", "--per-class", "10", "--dim", "8"];

fn small_store(dir: &Path, name: &str, seed: &str) {
    let mut args = vec!["gen", "--out", name, "--seed", seed];
    args.extend_from_slice(SMALL);
    ok(&args, dir);
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_default_store_has_600_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gen", "--out", "s.simf"], dir.path());
    assert!(out.contains("wrote 600 items"), "{out}");
    let m = manifest(&dir.path().join("s.simf.manifest.json"));
    assert_eq!(m["command"], "gen");
    assert_eq!(m["config"]["per_class_count"], 60);
    assert_eq!(m["results"]["n_items"], 600);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    small_store(dir.path(), "a.simf", "1");
    small_store(dir.path(), "b.simf", "1");
    small_store(dir.path(), "c.simf", "2");
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.simf"), read("b.simf"));
    assert_eq!(read("a.simf.queries"), read("b.simf.queries"));
    assert_ne!(read("a.simf"), read("c.simf"));
}

#[test]
fn gen_spec_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), r#"{"n_classes": 3, "per_class_count": 5, "dim": 4}"#).unwrap();
    let out = ok(&["gen", "--spec", "spec.json", "--per-class", "8", "--out", "s.simf"], dir.path());
    assert!(out.contains("wrote 24 items"), "{out}");
}

#[test]
fn gen_single_item_classes_with_queries_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = simnet(&["gen", "--per-class", "1", "--queries", "0.2", "--out", "s.simf"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 items per class"));
    assert!(!dir.path().join("s.simf").exists());
}

#[test]
fn unknown_scorer_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    small_store(dir.path(), "s.simf", "0");
    let out = simnet(&["eval", "--store", "s.simf", "--scorer", "hamming"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scorer"));
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    small_store(dir.path(), "s.simf", "0");
    let out = simnet(&["eval", "--store", "s.simf", "--scorer", "simnet:nope.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_threads_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = simnet(&["--threads", "0", "gen", "--out", "s.simf"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_duplicate_store_with_cosine_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen", "--out", "s.simf", "--noise", "1e-9", "--bridge", "0"];
    args.extend_from_slice(SMALL);
    ok(&args, dir.path());
    let out = ok(&["eval", "--store", "s.simf", "--scorer", "cosine", "--report", "r.jsonl"], dir.path());
    assert!(out.contains("1.0000"), "{out}");
    let report = fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["scorer"], "cosine");
        assert_eq!(v["ap"], 1.0);
    }
    assert!(dir.path().join("r.jsonl.manifest.json").exists());
}

#[test]
fn eval_dim_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    small_store(dir.path(), "s.simf", "0");
    ok(
        &[
            "warmup",
            "--dim",
            "6",
            "--hidden",
            "8",
            "--scale",
            "1",
            "--pairs",
            "200",
            "--val-pairs",
            "20",
            "--out",
            "w.ckpt",
        ],
        dir.path(),
    );
    let out = simnet(&["eval", "--store", "s.simf", "--scorer", "simnet:w.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_single_scorer_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    small_store(dir.path(), "s.simf", "0");
    let out = ok(&["compare", "--store", "s.simf", "--scorers", "euclid"], dir.path());
    assert_eq!(out.lines().count(), 3, "{out}");
    assert!(out.lines().nth(2).unwrap().starts_with("euclid"));
}

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train", "--store", "s.simf", "--hidden", "16", "--scale", "1", "--pairs", "400", "--epochs", "4",
        "--lr", "0.01",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn full_pipeline_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_store(d, "s.simf", "3");
    ok(
        &[
            "warmup",
            "--dim",
            "8",
            "--hidden",
            "16",
            "--scale",
            "1",
            "--pairs",
            "2000",
            "--val-pairs",
            "50",
            "--out",
            "w.ckpt",
        ],
        d,
    );
    let wm = manifest(&d.join("w.ckpt.manifest.json"));
    assert!(wm["results"]["mse"].as_f64().unwrap().is_finite());
    assert_eq!(wm["config"]["warmup"]["optimizer"]["momentum"], 0.9);

    let refine = |out: &str, threads: &str| {
        ok(
            &[
                &["--threads", threads][..],
                &train_args(&["--model-in", "w.ckpt", "--refine", "--pool", "20", "--out", out]),
            ]
            .concat(),
            d,
        )
    };
    refine("a.ckpt", "1");
    refine("b.ckpt", "3");
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
    assert_eq!(fs::read(d.join("a.ckpt.log.jsonl")).unwrap(), fs::read(d.join("b.ckpt.log.jsonl")).unwrap());
    let log = fs::read_to_string(d.join("a.ckpt.log.jsonl")).unwrap();
    let phases: std::collections::BTreeSet<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["phase"].as_str().unwrap().to_string())
        .collect();
    assert!(phases.len() >= 2, "{phases:?}");
    let tm = manifest(&d.join("a.ckpt.manifest.json"));
    assert_eq!(tm["config"]["train"]["margin"], 0.8);
    assert_eq!(tm["config"]["train"]["optimizer"]["weight_decay"], 0.0005);

    ok(&train_args(&["--family", "linear", "--out", "lin.ckpt"]), d);
    ok(&["mine", "--store", "s.simf", "--model", "a.ckpt", "--pool", "20", "--out", "m.jsonl"], d);
    for line in fs::read_to_string(d.join("m.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["baseline_sim"].is_number());
    }

    let compare = |report: &str, seq: bool| {
        let mut args = vec![];
        if seq {
            args.push("--sequential");
        }
        args.extend([
            "compare",
            "--store",
            "s.simf",
            "--scorers",
            "cosine,linear:lin.ckpt,simnet:a.ckpt",
            "--report",
            report,
        ]);
        ok(&args, d)
    };
    let table = compare("r1.jsonl", false);
    assert_eq!(table, compare("r2.jsonl", true));
    assert_eq!(fs::read(d.join("r1.jsonl")).unwrap(), fs::read(d.join("r2.jsonl")).unwrap());
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert!(
        rows[0].starts_with("cosine") && rows[1].starts_with("linear:") && rows[2].starts_with("simnet:")
    );

    let cm = manifest(&d.join("r1.jsonl.manifest.json"));
    assert!(cm["timing"]["elapsed_secs"].is_number());
    let mut a = manifest(&d.join("r1.jsonl.manifest.json"));
    let mut b = manifest(&d.join("r2.jsonl.manifest.json"));
    a.as_object_mut().unwrap().remove("timing");
    b.as_object_mut().unwrap().remove("timing");
    a["outputs"][0]["path"] = serde_json::Value::Null;
    b["outputs"][0]["path"] = serde_json::Value::Null;
    assert_eq!(a, b);
}

#[test]
fn zero_delta_trains_toward_cosine() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_store(d, "s.simf", "0");
    ok(&train_args(&["--delta", "0", "--out", "z.ckpt"]), d);
    let m = manifest(&d.join("z.ckpt.manifest.json"));
    assert_eq!(m["config"]["train"]["margin"], 0.0);
    assert_eq!(m["results"]["phases"], serde_json::json!(["base"]));
}

#[test]
fn divergent_warmup_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = simnet(
        &[
            "warmup",
            "--dim",
            "8",
            "--hidden",
            "16",
            "--scale",
            "1",
            "--pairs",
            "5000",
            "--val-pairs",
            "50",
            "--lr",
            "1e6",
            "--schedule",
            "constant",
            "--out",
            "w.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("w.ckpt").exists());
}
