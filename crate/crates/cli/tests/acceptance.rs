//! End-to-end checks on the `rlsf` binary: byte-identical artifacts across
//! independent runs, the four-row report table, idempotent reruns, discount
//! override plumbing, and the documented exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn rlsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlsf"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A run configuration small enough for the full pipeline to finish in tens
/// of seconds while still producing preference pairs and trained policies.
fn config_toml(out_dir: &Path) -> String {
    format!(
        r#"seed = 7
out_dir = {out_dir:?}

[corpus]
n_sft = 60
n_rlsf = 12
n_eval = 10
reasoning_ratio = 0.5
multiple_choice_fraction = 0.25
difficulties = [1]

[model]
d_model = 16
n_layers = 2
n_heads = 2
context_len = 96

[sft]
lr = 3e-3
epochs = 40

[cot]
k = 4
max_new_tokens = 40

[reward]
epochs = 2

[ppo]
iterations = 2
epochs = 1
max_new_tokens = 40
disparity_eval_prompts = 4

[dpo]
epochs = 1

[eval]
max_new_tokens = 40
"#,
        out_dir = out_dir.display().to_string(),
    )
}

struct Fixture {
    _tmp: tempfile::TempDir,
    cfg_a: PathBuf,
    out_a: PathBuf,
    out_b: PathBuf,
    /// Artifact bytes captured right after the two pipeline runs, so later
    /// tests that mutate the output directories cannot interfere.
    prefs: (Vec<u8>, Vec<u8>),
    metrics: (Vec<u8>, Vec<u8>),
    reliability: (Vec<u8>, Vec<u8>),
    report: (Vec<u8>, Vec<u8>),
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let tmp = tempfile::tempdir().expect("tempdir");
        let out_a = tmp.path().join("out_a");
        let out_b = tmp.path().join("out_b");
        let cfg_a = tmp.path().join("run_a.toml");
        let cfg_b = tmp.path().join("run_b.toml");
        fs::write(&cfg_a, config_toml(&out_a)).unwrap();
        fs::write(&cfg_b, config_toml(&out_b)).unwrap();
        for cfg in [&cfg_a, &cfg_b] {
            let run = rlsf(&["pipeline", "--config", cfg.to_str().unwrap()]);
            assert!(
                run.status.success(),
                "pipeline failed for {cfg:?}\nstdout:\n{}\nstderr:\n{}",
                stdout(&run),
                stderr(&run),
            );
        }
        let grab = |name: &str| {
            (
                fs::read(out_a.join(name)).unwrap(),
                fs::read(out_b.join(name)).unwrap(),
            )
        };
        Fixture {
            prefs: grab("prefs.jsonl"),
            metrics: grab("ppo_metrics.csv"),
            reliability: grab("reliability_sft_greedy.csv"),
            report: grab("report.json"),
            _tmp: tmp,
            cfg_a,
            out_a,
            out_b,
        }
    })
}

#[test]
fn acceptance_09_independent_runs_are_byte_identical() {
    let fix = fixture();
    assert!(!fix.prefs.0.is_empty(), "preference dataset is empty");
    assert_eq!(fix.prefs.0, fix.prefs.1, "prefs.jsonl differs between runs");
    assert_eq!(
        fix.metrics.0, fix.metrics.1,
        "ppo_metrics.csv differs between runs"
    );
    assert_eq!(
        fix.reliability.0, fix.reliability.1,
        "reliability csv differs between runs"
    );
    assert_eq!(
        fix.report.0, fix.report.1,
        "report.json differs between runs"
    );
    println!(
        "ACCEPTANCE 9 determinism: PASS ({} prefs bytes, {} metrics bytes identical)",
        fix.prefs.0.len(),
        fix.metrics.0.len()
    );
}

#[test]
fn acceptance_10_report_table_includes_dpo_row() {
    let fix = fixture();
    let report: serde_json::Value = serde_json::from_slice(&fix.report.0).unwrap();
    let rows = report["rows"].as_array().expect("rows array");
    assert_eq!(rows.len(), 4, "expected the four headline rows");
    let mut combos: Vec<(String, String)> = rows
        .iter()
        .map(|r| {
            (
                r["policy"].as_str().unwrap().to_string(),
                r["mode"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    combos.sort();
    assert_eq!(
        combos,
        vec![
            ("dpo".into(), "greedy".into()),
            ("ppo".into(), "greedy".into()),
            ("sft".into(), "cot_decode".into()),
            ("sft".into(), "greedy".into()),
        ]
    );
    let dpo = rows.iter().find(|r| r["policy"] == "dpo").unwrap();
    let accuracy = dpo["accuracy"].as_f64().unwrap();
    let ece = dpo["ece"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy) && (0.0..=1.0).contains(&ece));
    println!("ACCEPTANCE 10 (report half): PASS (dpo row accuracy {accuracy:.4}, ece {ece:.4})");
}

#[test]
fn rerunning_a_finished_pipeline_skips_every_stage() {
    let fix = fixture();
    let rerun = rlsf(&["pipeline", "--config", fix.cfg_a.to_str().unwrap()]);
    assert!(rerun.status.success(), "rerun failed: {}", stderr(&rerun));
    let log = stdout(&rerun);
    for stage in [
        "gen-corpus",
        "sft",
        "cot-decode",
        "build-prefs",
        "train-rm",
        "ppo",
        "dpo",
        "eval:sft:greedy",
        "eval:sft:cot",
        "eval:ppo:greedy",
        "eval:dpo:greedy",
        "report",
    ] {
        assert!(
            log.contains(&format!("[{stage}] up to date, skipping")),
            "stage {stage} was not skipped on rerun:\n{log}"
        );
    }
    let prefs_after = fs::read(fix.out_a.join("prefs.jsonl")).unwrap();
    assert_eq!(prefs_after, fix.prefs.0, "rerun rewrote prefs.jsonl");
}

#[test]
fn gamma_override_warns_and_forces_a_retrain() {
    let fix = fixture();
    // run against out_b so the rerun-skip test on out_a is undisturbed
    let cfg_b = fix._tmp.path().join("run_b.toml");
    let before = fs::read(fix.out_b.join("policy_ppo.json")).unwrap();
    let run = rlsf(&["ppo", "--config", cfg_b.to_str().unwrap(), "--gamma", "1.0"]);
    assert!(
        run.status.success(),
        "gamma override run failed: {}",
        stderr(&run)
    );
    assert!(
        stderr(&run).contains("[ppo] gamma = 1.0 overrides the reference default 0.98"),
        "missing default-override warning:\n{}",
        stderr(&run)
    );
    assert!(
        !stdout(&run).contains("[ppo] up to date"),
        "gamma override should invalidate the cached ppo stage"
    );
    let after = fs::read(fix.out_b.join("policy_ppo.json")).unwrap();
    assert_ne!(
        before, after,
        "gamma=1.0 retrain produced an identical policy checkpoint"
    );
}

#[test]
fn missing_artifact_exits_3_and_names_the_producer_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, config_toml(&out)).unwrap();
    let run = rlsf(&["train-rm", "--config", cfg.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(3), "stderr: {}", stderr(&run));
    assert!(
        stderr(&run).contains("run `rlsf"),
        "error should name the producing stage: {}",
        stderr(&run)
    );
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let unknown_key = tmp.path().join("unknown.toml");
    fs::write(
        &unknown_key,
        format!("{}\ntypo_key = 1\n", config_toml(&out)),
    )
    .unwrap();
    let run = rlsf(&["gen-corpus", "--config", unknown_key.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2), "stderr: {}", stderr(&run));

    let bad_value = tmp.path().join("bad.toml");
    fs::write(
        &bad_value,
        config_toml(&out).replace("[eval]", "[eval]\nbins = 0"),
    )
    .unwrap();
    let run = rlsf(&["gen-corpus", "--config", bad_value.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2), "stderr: {}", stderr(&run));

    let run = rlsf(&["gen-corpus", "--config", "/nonexistent/run.toml"]);
    assert_eq!(run.status.code(), Some(2), "stderr: {}", stderr(&run));
}

#[test]
fn a_held_lock_exits_1_without_touching_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, config_toml(&out)).unwrap();
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".rlsf.lock"), "held\n").unwrap();
    let run = rlsf(&["gen-corpus", "--config", cfg.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(1), "stderr: {}", stderr(&run));
    assert!(!out.join("manifest.json").exists());
    fs::remove_file(out.join(".rlsf.lock")).unwrap();
    let run = rlsf(&["gen-corpus", "--config", cfg.to_str().unwrap()]);
    assert!(run.status.success(), "after lock removal: {}", stderr(&run));
}
