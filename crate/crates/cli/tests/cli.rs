use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossmodal_har::models::{count_flops, count_inference_params, Variant, WINDOW_LEN};
use crossmodal_har::study::ModelSize;

const TINY: &str = r#"{
  "synth": {"session_seconds": 20},
  "size": {"conv_channels": 6, "lstm_hidden": 6, "embed_dim": 8, "classifier_hidden": 8},
  "train": {"max_epochs": 2, "batch_size": 32}
}"#;

fn har(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_har"));
    cmd.args(args).env_remove("HAR_NUM_WORKERS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn har")
}

fn ok(args: &[&str]) -> String {
    let out = har(args, &[]);
    assert!(
        out.status.success(),
        "har {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Run {
    _tmp: tempfile::TempDir,
    out: PathBuf,
    cfg: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tmp.path().join("cfg.json");
        fs::write(&cfg, TINY).unwrap();
        let out = tmp.path().join("run");
        Self { _tmp: tmp, out, cfg }
    }

    fn args<'a>(&'a self, sub: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec![sub, "--config", self.cfg.to_str().unwrap(), "--out", self.out.to_str().unwrap()];
        v.extend_from_slice(extra);
        v
    }

    fn prepare(&self, seed: &str) {
        ok(&self.args("synth", &["--seed", seed]));
        ok(&self.args("ingest", &[]));
        ok(&self.args("window", &["--seed", seed]));
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_exits_zero() {
    let out = har(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "ingest", "window", "train", "eval", "bench", "flops", "compare"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(har(&["--definitely-not-a-flag"], &[]).status.code(), Some(2));
    assert_eq!(har(&["train", "--model", "bogus"], &[]).status.code(), Some(2));
    assert_eq!(har(&["eval", "--model", "light", "--test-set", "4"], &[]).status.code(), Some(2));
}

#[test]
fn flops_table_matches_counters() {
    let run = Run::new();
    for (name, v) in [("light", Variant::LightHar), ("inertial", Variant::InertialHar), ("multilight", Variant::MultiLight), ("contralight", Variant::ContraLight)] {
        let text = ok(&["flops", "--model", name, "--out", run.out.to_str().unwrap()]);
        let spec = ModelSize::default().spec(v);
        let total = text.lines().find(|l| l.starts_with("total (inference)")).unwrap();
        let nums: Vec<u64> = total.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        assert_eq!(nums, vec![count_inference_params(&spec) as u64, count_flops(&spec, WINDOW_LEN)]);
    }
    let light = json(&run.out.join("flops/lighthar/flops.json"));
    assert_eq!(light["inference_params"], 339_466);
}

#[test]
fn runtime_errors_are_json_with_exit_one() {
    let run = Run::new();
    let out = har(&run.args("eval", &["--model", "light", "--test-set", "1"]), &[]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());

    let out = har(&run.args("synth", &[]), &[("HAR_NUM_WORKERS", "zero")]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn worker_count_does_not_change_ingest() {
    let run = Run::new();
    ok(&run.args("synth", &["--seed", "5"]));
    ok(&run.args("ingest", &[]));
    let one = fs::read(run.out.join("ingested/subject_03.csv")).unwrap();
    let out = har(&run.args("ingest", &[]), &[("HAR_NUM_WORKERS", "3")]);
    assert!(out.status.success());
    assert_eq!(one, fs::read(run.out.join("ingested/subject_03.csv")).unwrap());
    assert_eq!(json(&run.out.join("ingested/run.json"))["num_workers"], 3);
}

#[test]
fn full_pipeline_writes_artifacts() {
    let run = Run::new();
    run.prepare("7");
    let splits = json(&run.out.join("windows/splits.json"));
    for name in ["train", "val", "test1", "test2", "test3"] {
        assert!(!splits["splits"][name].as_array().unwrap().is_empty(), "{name} empty");
    }

    ok(&run.args("train", &["--model", "contralight"]));
    let mdir = run.out.join("models/contralight");
    for f in ["checkpoint/manifest.json", "checkpoint/spec.json", "train_log.jsonl", "loss_log.jsonl", "record.json", "run.json"] {
        assert!(mdir.join(f).exists(), "missing {f}");
    }
    let steps = fs::read_to_string(mdir.join("loss_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
    for k in ["l_co", "l_ce_light", "l_ce_imu", "l_total"] {
        assert!(first[k].is_number(), "loss log lacks {k}");
    }
    let epochs = fs::read_to_string(mdir.join("train_log.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 2);

    ok(&run.args("train", &["--model", "inertial"]));
    let mut reports = Vec::new();
    for model in ["contralight", "inertial"] {
        for t in ["1", "2"] {
            ok(&run.args("eval", &["--model", model, "--test-set", t]));
        }
    }
    for entry in fs::read_dir(run.out.join("eval")).unwrap() {
        let dir = entry.unwrap().path();
        let report = json(&dir.join("report.json"));
        let acc = report["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let csv = fs::read_to_string(dir.join("confusion.csv")).unwrap();
        assert_eq!(csv.lines().count(), 11);
        reports.push(dir.join("report.json"));
    }
    assert_eq!(reports.len(), 4);

    ok(&run.args("bench", &["--model", "contralight", "--passes", "5", "--warmup", "1"]));
    let lat = json(&run.out.join("bench/contralight/latency.json"));
    assert_eq!(lat["latency_ms"]["passes"], 5);

    let mut args = run.args("compare", &[]);
    let paths: Vec<String> = reports.iter().map(|p| p.display().to_string()).collect();
    args.extend(paths.iter().map(String::as_str));
    let table = ok(&args);
    assert!(table.contains("ContraLight") && table.contains("InertialHAR"));
    let cmp = json(&run.out.join("compare/comparison.json"));
    assert_eq!(cmp["rows"].as_array().unwrap().len(), 4);

    let rec = json(&run.out.join("eval/contralight_test1_native/run.json"));
    assert_eq!(rec["subcommand"], "eval");
    let inputs = rec["inputs"].as_object().unwrap();
    assert!(inputs.keys().any(|k| k.contains("checkpoint")));
    assert!(inputs.values().all(|h| h.as_str().unwrap().len() == 64));
    assert!(rec["outputs"].as_object().unwrap().contains_key("eval/contralight_test1_native/report.json"));
}

#[test]
fn same_seed_reproduces_checkpoint_and_report() {
    let digest = |run: &Run| {
        run.prepare("11");
        ok(&run.args("train", &["--model", "light"]));
        ok(&run.args("eval", &["--model", "light", "--test-set", "3"]));
        let rec = json(&run.out.join("eval/lighthar_test3_native/run.json"));
        let mut outputs = json(&run.out.join("models/lighthar/run.json"))["outputs"].clone();
        // wall-clock fields differ run to run
        let obj = outputs.as_object_mut().unwrap();
        obj.retain(|k, _| k.contains("checkpoint/tensors") || k.ends_with("manifest.json"));
        (obj.clone(), rec["outputs"].clone())
    };
    let a = digest(&Run::new());
    let b = digest(&Run::new());
    assert!(!a.0.is_empty());
    assert_eq!(a, b);
}

#[test]
fn train_rejects_stats_not_fitted_on_training_split() {
    let run = Run::new();
    run.prepare("13");
    let path = run.out.join("windows/norm_stats.json");
    let mut stats = json(&path);
    stats["als_mean"] = serde_json::json!(stats["als_mean"].as_f64().unwrap() + 0.5);
    fs::write(&path, serde_json::to_string_pretty(&stats).unwrap()).unwrap();
    let out = har(&run.args("train", &["--model", "light"]), &[]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");
}
