//! End-to-end tests of the `glimpse` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_glimpse");

fn glimpse(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.env_remove("GLIMPSE_ORACLE");
    for a in args {
        cmd.arg(a);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_spec(dir: &Path, seed: u64, layers: usize) -> PathBuf {
    let spec = serde_json::json!({
        "dims": {"L": layers, "H": 2, "K": 16, "M": 3, "T": 4},
        "planted_patches": [2, 9],
        "signal_strength": 1.0,
        "rng_seed": seed,
    });
    let path = dir.join(format!("spec_{seed}_{layers}.json"));
    fs::write(&path, spec.to_string()).unwrap();
    path
}

fn synth(dir: &Path, seed: u64, layers: usize) -> PathBuf {
    let out = dir.join(format!("trace_{seed}_{layers}"));
    let o = glimpse(&[&"-q", &"synth", &write_spec(dir, seed, layers), &"--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn corpus(dir: &Path, count: usize) -> PathBuf {
    let out = dir.join("corpus");
    let n = count.to_string();
    let o = glimpse(&[&"-q", &"synth-corpus", &"--out", &out, &"--count", &n.as_str()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("corpus.json")
}

#[test]
fn explain_writes_all_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = synth(tmp.path(), 3, 4);
    let out = tmp.path().join("out");
    assert_eq!(code(&glimpse(&[&"explain", &trace, &"--out", &out])), 0);
    let dir = out.join("synth-3");
    let names = ["saliency.csv", "saliency.pgm", "prompt_saliency.csv", "tokens.json", "run_config.json"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| fs::read(dir.join(n)).unwrap()).collect();
    assert_eq!(json(&dir.join("run_config.json"))["command"], "explain");

    assert_eq!(code(&glimpse(&[&"explain", &trace, &"--out", &out])), 0);
    let second: Vec<Vec<u8>> = names.iter().map(|n| fs::read(dir.join(n)).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn corrupt_manifest_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = synth(tmp.path(), 4, 2);
    fs::write(trace.join("manifest.json"), "{ not json").unwrap();
    let o = glimpse(&[&"explain", &trace, &"--out", &tmp.path().join("o")]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn missing_trace_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = glimpse(&[&"explain", &tmp.path().join("nope"), &"--out", &tmp.path().join("o")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn baseline_all_writes_five_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = synth(tmp.path(), 5, 4);
    let out = tmp.path().join("out");
    assert_eq!(code(&glimpse(&[&"-q", &"baseline", &trace, &"--out", &out])), 0);
    let base = out.join("synth-5").join("baselines");
    for kind in ["raw_attention", "rollout", "grad_cam", "tmme", "tmme_last_4"] {
        assert!(base.join(kind).join("saliency.csv").is_file(), "{kind}");
    }
    assert_eq!(fs::read_dir(&base).unwrap().count(), 5);
}

#[test]
fn baseline_kind_and_last_k_are_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = synth(tmp.path(), 6, 6);
    let out = tmp.path().join("out");
    assert_eq!(code(&glimpse(&[&"baseline", &trace, &"--kind", &"saliency-magic", &"--out", &out])), 1);
    assert_eq!(
        code(&glimpse(&[&"-q", &"baseline", &trace, &"--kind", &"tmme", &"--last-k", &"3", &"--out", &out])),
        0
    );
    assert!(out.join("synth-6/baselines/tmme_last_3/saliency.csv").is_file());
    assert_eq!(code(&glimpse(&[&"baseline", &trace, &"--kind", &"tmme", &"--last-k", &"9", &"--out", &out])), 1);
}

#[test]
fn eval_align_scores_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path(), 3);
    let mean_nss = |method: &str| {
        let out = tmp.path().join(format!("align_{method}"));
        let o = glimpse(&[&"-q", &"eval-align", &manifest, &"--method", &method, &"--out", &out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let s = json(&out.join("alignment_summary.json"));
        assert_eq!(s["n"], 3);
        let rows = fs::read_to_string(out.join("alignment.csv")).unwrap();
        assert_eq!(rows.lines().count(), 4);
        s["nss"]["mean"].as_f64().unwrap()
    };
    assert!(mean_nss("glimpse") > mean_nss("raw"));
}

#[test]
fn eval_align_empty_corpus_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("corpus.json");
    fs::write(&manifest, "[]").unwrap();
    assert_eq!(code(&glimpse(&[&"eval-align", &manifest, &"--out", &tmp.path().join("o")])), 1);
}

#[test]
fn eval_faith_with_synthetic_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path(), 4);
    let run = |method: &str, levels: &str| {
        let out = tmp.path().join(format!("faith_{method}_{levels}"));
        let o = glimpse(&[
            &"-q",
            &"eval-faith",
            &manifest,
            &"--method",
            &method,
            &"--synthetic-oracle",
            &"--levels",
            &levels,
            &"--out",
            &out,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        json(&out.join("faith_summary.json"))
    };
    let single = run("glimpse", "0.10");
    assert_eq!(single["deletion"].as_array().unwrap().len(), 1);
    assert_eq!(single["deletion"][0]["level"], 0.10);

    let del = |s: &Value| s["deletion"][0]["auc"]["mean"].as_f64().unwrap();
    let ours = run("glimpse", "0.15");
    let rollout = run("rollout", "0.15");
    assert!(del(&ours) < del(&rollout));
}

#[test]
fn dead_oracle_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path(), 1);
    let o = glimpse(&[
        &"eval-faith",
        &manifest,
        &"--oracle",
        &"127.0.0.1:1",
        &"--oracle-timeout",
        &"1",
        &"--out",
        &tmp.path().join("o"),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn missing_oracle_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path(), 1);
    assert_eq!(code(&glimpse(&[&"eval-faith", &manifest, &"--out", &tmp.path().join("o")])), 1);
}

fn exec_oracle(manifest: &Path) -> String {
    format!("exec:{BIN} -q serve-oracle {} --stdio", manifest.display())
}

#[test]
fn exec_oracle_matches_in_process_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path(), 2);
    let local = tmp.path().join("local");
    let remote = tmp.path().join("remote");
    let endpoint = exec_oracle(&manifest);
    assert_eq!(
        code(&glimpse(&[&"-q", &"eval-faith", &manifest, &"--synthetic-oracle", &"--out", &local])),
        0
    );
    let o = glimpse(&[&"-q", &"eval-faith", &manifest, &"--oracle", &endpoint.as_str(), &"--out", &remote]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(local.join("auc.csv")).unwrap(),
        fs::read(remote.join("auc.csv")).unwrap()
    );
}

#[test]
fn oracle_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path(), 1);
    let out = tmp.path().join("o");
    let o = Command::new(BIN)
        .args(["-q", "eval-faith"])
        .arg(&manifest)
        .arg("--out")
        .arg(&out)
        .env("GLIMPSE_ORACLE", exec_oracle(&manifest))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json(&out.join("faith_summary.json"));
    assert!(summary["oracle"].as_str().unwrap().contains("serve-oracle"));
}

#[test]
fn synth_then_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = synth(tmp.path(), 8, 3);
    let o = glimpse(&[&"validate", &trace]);
    assert_eq!(code(&o), 0);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["ok"], true);
}

#[test]
fn tampered_attention_fails_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = synth(tmp.path(), 9, 2);
    let blob = trace.join("attn.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[..4].copy_from_slice(&7.5f32.to_le_bytes());
    fs::write(&blob, bytes).unwrap();
    let o = glimpse(&[&"validate", &trace]);
    assert_eq!(code(&o), 1);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["ok"], false);
    assert_eq!(code(&glimpse(&[&"explain", &trace, &"--out", &tmp.path().join("o")])), 1);
}

#[test]
fn synth_is_seed_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), 11, 3);
    let again = tmp.path().join("again");
    let spec = write_spec(tmp.path(), 11, 3);
    assert_eq!(code(&glimpse(&[&"-q", &"synth", &spec, &"--out", &again])), 0);
    let b = synth(tmp.path(), 12, 3);
    for blob in ["attn.bin", "grad_000.bin", "manifest.json"] {
        assert_eq!(fs::read(a.join(blob)).unwrap(), fs::read(again.join(blob)).unwrap(), "{blob}");
    }
    assert_ne!(fs::read(a.join("attn.bin")).unwrap(), fs::read(b.join("attn.bin")).unwrap());
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = synth(tmp.path(), 13, 3);
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "fusion_temperature = 2.0\nflow_strength = 0.25\n").unwrap();
    let out = tmp.path().join("o");
    let o = glimpse(&[&"-q", &"explain", &trace, &"--out", &out, &"--config", &cfg, &"--flow-strength", &"0.75"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rc = json(&out.join("synth-13/run_config.json"));
    assert_eq!(rc["config"]["engine"]["fusion_temperature"], 2.0);
    assert_eq!(rc["config"]["tokens"]["flow_strength"], 0.75);

    fs::write(&cfg, "no_such_knob = 1\n").unwrap();
    assert_eq!(code(&glimpse(&[&"explain", &trace, &"--out", &out, &"--config", &cfg])), 1);
}

#[test]
fn invalid_flag_values_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = synth(tmp.path(), 14, 2);
    let out = tmp.path().join("o");
    assert_eq!(code(&glimpse(&[&"explain", &trace, &"--out", &out, &"--layer-fraction", &"0"])), 1);
    assert_eq!(code(&glimpse(&[&"explain", &trace, &"--out", &out, &"--flow-strength", &"1.5"])), 1);
    assert_eq!(code(&glimpse(&[&"explain"])), 1);
}

#[test]
fn json_logging() {
    let tmp = tempfile::tempdir().unwrap();
    let o = glimpse(&[&"--log-json", &"validate", &tmp.path().join("missing")]);
    assert_eq!(code(&o), 2);
    let line = String::from_utf8_lossy(&o.stderr);
    let rec: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(rec["level"], "error");
}
