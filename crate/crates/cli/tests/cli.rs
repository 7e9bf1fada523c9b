use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use promptseg::checkpoint;
use promptseg::sweep::StudyState;
use promptseg::training::MetricRecord;
use serde_json::Value;

const TINY: &str = r#"{
  "backbone": { "config": { "image_size": 16 }, "seed": 3 },
  "data": { "spec": { "image_size": 16, "source_size": 20, "train": 4, "val": 2, "test": 2, "seed": 5 } },
  "train": { "steps": 3, "batch_size": 2, "micro_batch": 2, "eval_every": 2, "eval_samples": 2 }
}"#;

fn promptseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let o = promptseg(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cannot read"), "{}", stderr(&o));
}

#[test]
fn bad_flags_and_unknown_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(promptseg(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(promptseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(promptseg(&["train", "--strategy", "lora", "--out", out]).status.code(), Some(1));
    let o = promptseg(&["train", "--set", "train.stepz=1", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown config key"), "{}", stderr(&o));
    let o = promptseg(&["train", "--set", "train.steps=many", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_parseable_artifacts_and_is_reproducible_from_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let o = promptseg(&[
        "train", "--config", &cfg, "--strategy", "maple", "--prompt-depth", "2", "--seed", "9", "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("val dice"));

    let ckpt = checkpoint::load(&a.join("prompts.ckpt")).unwrap();
    assert_eq!(ckpt.meta["prompt"]["kind"], "maple");
    assert_eq!(ckpt.meta["prompt"]["depth"], 2);
    let metrics: Vec<MetricRecord> = fs::read_to_string(a.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(metrics.last().unwrap().step, 3);
    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert!(summary["test_dice"].as_f64().unwrap() >= 0.0);

    let snapshot: Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["train"]["seed"], 9);
    assert_eq!(snapshot["train"]["prompt"]["kind"], "maple");
    let b = dir.path().join("b");
    let o = promptseg(&[
        "train", "--config", a.join("config.json").to_str().unwrap(), "--out", b.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("prompts.ckpt")).unwrap(), fs::read(b.join("prompts.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
}

#[test]
fn backbone_mutation_exits_with_freeze_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = promptseg(&[
        "train", "--config", &cfg, "--set", "train.inject_backbone_mutation_at=1", "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("freeze violation"));
}

#[test]
fn init_ablation_rejects_vpt_and_persists_paired_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("init");
    let o = promptseg(&[
        "ablate-init", "--config", &cfg, "--set", r#"ablation.strategies=["coop","vpt"]"#, "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("configuration error"), "{}", stderr(&o));

    let o = promptseg(&[
        "ablate-init", "--config", &cfg, "--set", r#"ablation.strategies=["coop"]"#, "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("ablate_init.json")).unwrap()).unwrap();
    let deltas = report["deltas"].as_array().unwrap();
    assert_eq!(deltas.len(), 3);
    let seeds: Vec<u64> = deltas.iter().map(|d| d["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, [0, 1, 2]);
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
}

#[test]
fn upsampler_ablation_reports_two_rows_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("up");
    let o = promptseg(&[
        "ablate-upsampler", "--config", &cfg, "--set", r#"ablation.strategies=["vpt","shared-separate"]"#,
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("ablate_upsampler.txt")).unwrap();
    assert!(text.contains("2.59"));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("ablate_upsampler.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    for kind in ["vpt", "shared-separate"] {
        let mine: Vec<&Value> = rows.iter().filter(|r| r["strategy"] == kind).collect();
        assert_eq!(mine.len(), 2);
        assert_eq!(mine[0]["backbone_checksum"], mine[1]["backbone_checksum"]);
    }
}

#[test]
fn sweep_resumes_and_report_regenerates_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    let run = |n: &str| {
        promptseg(&[
            "sweep", "--config", &cfg, "--set", r#"sweep.strategies=["coop","cocoop"]"#, "--set",
            &format!("sweep.n_trials={n}"), "--set", "sweep.compare_repetitions=2", "--set",
            "sweep.compare_trials=4", "--set", "train.steps=1", "--out", out.to_str().unwrap(),
        ])
    };
    let o = run("2");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run("3");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("resuming at trial 2"));
    let study = StudyState::load(&out.join("study_cocoop.jsonl")).unwrap();
    assert_eq!(study.trials.len(), 3);
    assert!(out.join("sampler_comparison.txt").exists());

    let rep = dir.path().join("rep");
    let o = promptseg(&[
        "report", "--set", &format!("report.studies=[{:?}]", out.to_str().unwrap()), "--out",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert!(csv.starts_with("strategy,synthetic,mean,std"), "{csv}");
    assert_eq!(csv.lines().count(), 3);
    assert!(fs::read_to_string(rep.join("depth_scatter.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn gen_data_writes_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("data");
    let o = promptseg(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let data = promptseg::data::load_manifest(&out.join("manifest.jsonl")).unwrap();
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (4, 2, 2));
}

#[test]
fn bundled_fixture_trains_coop_within_five_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/config.json");
    let start = std::time::Instant::now();
    let o = promptseg(&[
        "train", "--config", config.to_str().unwrap(), "--strategy", "coop", "--prompt-depth", "1", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 300, "{:?}", start.elapsed());
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    for key in ["train_dice", "val_dice", "test_dice", "baseline_val_dice"] {
        assert!(summary[key].as_f64().is_some_and(|d| (0.0..=1.0).contains(&d)), "{summary}");
    }
    assert!(checkpoint::load(&dir.path().join("prompts.ckpt")).is_ok());
}
