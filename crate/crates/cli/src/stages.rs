//! Pipeline stages and the artifact plumbing between them.
//!
//! Each stage reads plain files from the run directory, writes plain files
//! back, and records its configuration/input/output hashes in the manifest
//! so unchanged stages are skipped on rerun. Stage order:
//!
//! ```text
//! gen-corpus → sft → cot-decode → build-prefs → train-rm → ppo ─┐
//!                            └──────────────────────→ dpo ──────┼→ eval → report
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rlsf_core::checkpoint::{load_checkpoint, save_checkpoint};
use rlsf_core::corpus::{
    build_sft_corpus_with, build_task_set_with, read_jsonl, write_jsonl, SftExample, Task,
};
use rlsf_core::cot_decode::{cot_decode, Hypothesis};
use rlsf_core::eval::{evaluate_policy, EvalMode, EvalOutcome};
use rlsf_core::policy::{tokenize_example, train_sft, TrainSequence};
use rlsf_core::preference::{build_pairs, cap_pairs_per_prompt, dedup_pairs, PreferencePair};
use rlsf_core::reward_model::{train_reward_model, RewardModel};
use rlsf_core::rl::{dpo_train, ppo_train};
use rlsf_core::{par, Policy, TokenSeq, Vocabulary};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{config_hash, hash_file, Manifest};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const LOCK_FILE: &str = ".rlsf.lock";

pub const CORPUS_SFT: &str = "corpus_sft.jsonl";
pub const TASKS_RLSF: &str = "tasks_rlsf.jsonl";
pub const TASKS_EVAL: &str = "tasks_eval.jsonl";
pub const POLICY_SFT: &str = "policy_sft.json";
pub const SFT_REPORT: &str = "sft_report.json";
pub const DECODE: &str = "decode.jsonl";
pub const PREFS: &str = "prefs.jsonl";
pub const REWARD: &str = "reward.json";
pub const REWARD_REPORT: &str = "reward_report.json";
pub const POLICY_PPO: &str = "policy_ppo.json";
pub const PPO_METRICS: &str = "ppo_metrics.csv";
pub const PPO_REPORT: &str = "ppo_report.json";
pub const POLICY_DPO: &str = "policy_dpo.json";
pub const DPO_REPORT: &str = "dpo_report.json";
pub const REPORT_FILE: &str = "report.json";

/// The four headline evaluations `report` compares, in row order:
/// the supervised baseline greedy and with branching decode, then each
/// optimized policy greedy.
pub const REPORT_COMBOS: [(&str, &str); 4] = [
    ("sft", "greedy"),
    ("sft", "cot"),
    ("ppo", "greedy"),
    ("dpo", "greedy"),
];

pub fn eval_json(policy: &str, mode: &str) -> String {
    format!("eval_{policy}_{mode}.json")
}

pub fn reliability_csv(policy: &str, mode: &str) -> String {
    format!("reliability_{policy}_{mode}.csv")
}

/// Which stage writes a given artifact (for missing-artifact errors).
fn producer(file: &str) -> &'static str {
    match file {
        CORPUS_SFT | TASKS_RLSF | TASKS_EVAL => "gen-corpus",
        POLICY_SFT | SFT_REPORT => "sft",
        DECODE => "cot-decode",
        PREFS => "build-prefs",
        REWARD | REWARD_REPORT => "train-rm",
        POLICY_PPO | PPO_METRICS | PPO_REPORT => "ppo",
        POLICY_DPO | DPO_REPORT => "dpo",
        _ if file.starts_with("eval_") || file.starts_with("reliability_") => "eval",
        _ => "pipeline",
    }
}

/// Exclusive hold on a run directory; the lock file disappears on drop.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<LockGuard> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Open run directory: parsed configuration, manifest, and directory lock.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub manifest: Manifest,
    _lock: LockGuard,
}

impl Ctx {
    /// Parse the config, create and lock the output directory, load the
    /// manifest, and snapshot the effective configuration into the run.
    pub fn new(config_path: &Path) -> Result<Ctx> {
        let cfg = RunConfig::load(config_path)?;
        fs::create_dir_all(&cfg.out_dir)?;
        let lock = LockGuard::acquire(&cfg.out_dir)?;
        let manifest = Manifest::load(&cfg.out_dir)?;
        fs::write(cfg.out_dir.join(CONFIG_SNAPSHOT), cfg.to_toml()?)?;
        let out = cfg.out_dir.clone();
        Ok(Ctx {
            cfg,
            out,
            manifest,
            _lock: lock,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }
}

/// Check inputs, skip when the manifest says the stage is current, run the
/// body otherwise, then record the new hashes.
fn run_stage<F>(
    ctx: &mut Ctx,
    name: &str,
    config_hash: String,
    inputs: &[&str],
    outputs: &[&str],
    f: F,
) -> Result<()>
where
    F: FnOnce(&Ctx) -> Result<()>,
{
    let mut input_hashes = BTreeMap::new();
    for file in inputs {
        let path = ctx.path(file);
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                path,
                stage: producer(file),
            });
        }
        input_hashes.insert(file.to_string(), hash_file(&path)?);
    }
    if ctx
        .manifest
        .is_up_to_date(&ctx.out, name, &config_hash, &input_hashes)
    {
        println!("[{name}] up to date, skipping");
        return Ok(());
    }
    f(ctx)?;
    let mut output_hashes = BTreeMap::new();
    for file in outputs {
        output_hashes.insert(file.to_string(), hash_file(&ctx.path(file))?);
    }
    ctx.manifest
        .record(name, config_hash, input_hashes, output_hashes);
    ctx.manifest.save(&ctx.out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports are plain data");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("corrupt artifact {}: {e}", path.display())))
}

fn load_policy(ctx: &Ctx, file: &str) -> Result<Policy> {
    Ok(Policy::from_checkpoint(&load_checkpoint(&ctx.path(file))?)?)
}

/// One decoded prompt with all its scored hypotheses (a `decode.jsonl` row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRow {
    pub task_id: u64,
    pub prompt: String,
    pub hypotheses: Vec<Hypothesis>,
}

/// One line of the final comparison table (a `report.json` row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub mode: String,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub accuracy: f64,
    pub ece: f64,
    pub n: usize,
}

/// The aggregated comparison, exactly one row per headline evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub rows: Vec<ReportRow>,
}

/// Generate the three corpora. Evaluation prompts are drawn from a 3×
/// buffer and kept only if they collide with neither training corpus nor
/// an earlier evaluation prompt, so held-out really is held out.
pub fn gen_corpus(ctx: &mut Ctx) -> Result<()> {
    let snapshot = serde_json::json!({ "seed": ctx.cfg.seed, "corpus": ctx.cfg.corpus });
    let hash = config_hash("gen-corpus", &snapshot);
    run_stage(
        ctx,
        "gen-corpus",
        hash,
        &[],
        &[CORPUS_SFT, TASKS_RLSF, TASKS_EVAL],
        |ctx| {
            let c = &ctx.cfg.corpus;
            let opts = c.options();
            let sft = build_sft_corpus_with(
                ctx.cfg.corpus_seed("sft"),
                c.n_sft,
                c.reasoning_ratio,
                &opts,
            )?;
            let rlsf = build_task_set_with(ctx.cfg.corpus_seed("rlsf"), c.n_rlsf, &opts)?;

            let mut taken: BTreeSet<String> = sft.iter().map(|e| e.prompt.clone()).collect();
            taken.extend(rlsf.iter().map(|t| t.prompt.clone()));
            let buffer = build_task_set_with(ctx.cfg.corpus_seed("eval"), 3 * c.n_eval, &opts)?;
            let mut eval_tasks = Vec::with_capacity(c.n_eval);
            for task in buffer {
                if eval_tasks.len() == c.n_eval {
                    break;
                }
                if taken.insert(task.prompt.clone()) {
                    eval_tasks.push(task);
                }
            }
            if eval_tasks.len() < c.n_eval {
                return Err(CliError::Config(format!(
                    "only {} of {} evaluation prompts are distinct from the training corpora; \
                 lower corpus.n_eval or the training corpus sizes",
                    eval_tasks.len(),
                    c.n_eval
                )));
            }
            write_jsonl(&ctx.path(CORPUS_SFT), &sft)?;
            write_jsonl(&ctx.path(TASKS_RLSF), &rlsf)?;
            write_jsonl(&ctx.path(TASKS_EVAL), &eval_tasks)?;
            println!(
                "[gen-corpus] {} supervised examples, {} rollout tasks, {} held-out eval tasks",
                sft.len(),
                rlsf.len(),
                eval_tasks.len()
            );
            Ok(())
        },
    )
}

/// Train the policy from random initialization on the supervised corpus.
pub fn sft(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg.sft_effective();
    let snapshot = serde_json::json!({
        "model": ctx.cfg.model,
        "init_seed": ctx.cfg.model_init_seed(),
        "sft": cfg,
    });
    let hash = config_hash("sft", &snapshot);
    run_stage(
        ctx,
        "sft",
        hash,
        &[CORPUS_SFT],
        &[POLICY_SFT, SFT_REPORT],
        move |ctx| {
            let examples: Vec<SftExample> = read_jsonl(&ctx.path(CORPUS_SFT))?;
            let vocab = Vocabulary::new();
            let data: Vec<TrainSequence> = examples
                .iter()
                .map(|ex| tokenize_example(&vocab, ex))
                .collect::<rlsf_core::Result<_>>()?;
            let mut policy = Policy::init(ctx.cfg.model_config(), ctx.cfg.model_init_seed())?;
            let report = train_sft(&mut policy, &data, &cfg)?;
            save_checkpoint(
                &ctx.path(POLICY_SFT),
                &policy.to_checkpoint(report.steps, cfg.seed),
            )?;
            write_json(&ctx.path(SFT_REPORT), &report)?;
            println!(
                "[sft] {} examples, epoch loss {:.4} → {:.4}",
                data.len(),
                report.epoch_losses.first().copied().unwrap_or(f64::NAN),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        },
    )
}

/// Branch-decode every rollout prompt and score each hypothesis.
pub fn cot_decode_stage(ctx: &mut Ctx) -> Result<()> {
    let hash = config_hash("cot-decode", &ctx.cfg.cot);
    run_stage(
        ctx,
        "cot-decode",
        hash,
        &[POLICY_SFT, TASKS_RLSF],
        &[DECODE],
        |ctx| {
            let policy = load_policy(ctx, POLICY_SFT)?;
            let tasks: Vec<Task> = read_jsonl(&ctx.path(TASKS_RLSF))?;
            let vocab = Vocabulary::new();
            let rows: Vec<DecodeRow> =
                par::par_map(&tasks, |_, task| -> rlsf_core::Result<DecodeRow> {
                    let prompt = vocab.encode_prompt(&task.prompt)?;
                    let hypotheses = cot_decode(&policy, &vocab, &prompt, &ctx.cfg.cot)?;
                    Ok(DecodeRow {
                        task_id: task.id,
                        prompt: task.prompt.clone(),
                        hypotheses,
                    })
                })
                .into_iter()
                .collect::<rlsf_core::Result<_>>()?;
            write_jsonl(&ctx.path(DECODE), &rows)?;
            println!(
                "[cot-decode] {} prompts × {} branches",
                rows.len(),
                ctx.cfg.cot.k
            );
            Ok(())
        },
    )
}

/// Turn ranked hypotheses into deduplicated preference pairs.
pub fn build_prefs(ctx: &mut Ctx) -> Result<()> {
    let strategy = ctx.cfg.pair_strategy()?;
    let hash = config_hash("build-prefs", &ctx.cfg.pairs);
    run_stage(ctx, "build-prefs", hash, &[DECODE], &[PREFS], move |ctx| {
        let rows: Vec<DecodeRow> = read_jsonl(&ctx.path(DECODE))?;
        let mut pairs = Vec::new();
        for row in &rows {
            pairs.extend(build_pairs(&row.prompt, &row.hypotheses, strategy));
        }
        let mut pairs = dedup_pairs(pairs);
        if ctx.cfg.pairs.max_per_prompt > 0 {
            pairs = cap_pairs_per_prompt(pairs, ctx.cfg.pairs.max_per_prompt);
        }
        if pairs.is_empty() {
            return Err(CliError::Config(
                "no preference pairs could be built: the decoded hypotheses carry too few \
                 answer spans or confidence gaps below pairs.min_gap; train the policy longer \
                 ([sft]), raise [cot] k, or lower pairs.min_gap"
                    .into(),
            ));
        }
        write_jsonl(&ctx.path(PREFS), &pairs)?;
        println!(
            "[build-prefs] {} pairs from {} prompts",
            pairs.len(),
            rows.len()
        );
        Ok(())
    })
}

/// Fit the pairwise reward model on the preference pairs.
pub fn train_rm(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg.reward_effective();
    let hash = config_hash("train-rm", &cfg);
    run_stage(
        ctx,
        "train-rm",
        hash,
        &[PREFS, POLICY_SFT],
        &[REWARD, REWARD_REPORT],
        move |ctx| {
            let policy = load_policy(ctx, POLICY_SFT)?;
            let pairs: Vec<PreferencePair> = read_jsonl(&ctx.path(PREFS))?;
            let vocab = Vocabulary::new();
            let (rm, report) = train_reward_model(&policy, &vocab, &pairs, &cfg)?;
            let steps = (pairs.len().div_ceil(cfg.batch_size) * cfg.epochs) as u64;
            save_checkpoint(&ctx.path(REWARD), &rm.to_checkpoint(steps, cfg.seed))?;
            write_json(&ctx.path(REWARD_REPORT), &report)?;
            println!(
                "[train-rm] {} pairs, training ranking accuracy {:.3}",
                pairs.len(),
                report.train_accuracy
            );
            Ok(())
        },
    )
}

/// Optimize the policy against the frozen reward model.
pub fn ppo(ctx: &mut Ctx, gamma: Option<f64>) -> Result<()> {
    let cfg = ctx.cfg.ppo_effective(gamma);
    let hash = config_hash("ppo", &cfg);
    run_stage(
        ctx,
        "ppo",
        hash,
        &[POLICY_SFT, REWARD, TASKS_RLSF],
        &[POLICY_PPO, PPO_METRICS, PPO_REPORT],
        move |ctx| {
            let mut policy = load_policy(ctx, POLICY_SFT)?;
            let rm = RewardModel::from_checkpoint(&load_checkpoint(&ctx.path(REWARD))?)?;
            let tasks: Vec<Task> = read_jsonl(&ctx.path(TASKS_RLSF))?;
            let vocab = Vocabulary::new();
            let prompts: Vec<TokenSeq> = tasks
                .iter()
                .map(|t| vocab.encode_prompt(&t.prompt))
                .collect::<rlsf_core::Result<_>>()?;
            let report = ppo_train(&mut policy, &vocab, &rm, &prompts, &cfg)?;
            save_checkpoint(
                &ctx.path(POLICY_PPO),
                &policy.to_checkpoint(cfg.iterations as u64, cfg.seed),
            )?;
            fs::write(ctx.path(PPO_METRICS), report.to_csv())?;
            write_json(&ctx.path(PPO_REPORT), &report)?;
            if let (Some(first), Some(last)) = (report.rows.first(), report.rows.last()) {
                println!(
                    "[ppo] mean terminal reward {:.4} → {:.4} over {} iterations",
                    first.mean_terminal_reward,
                    last.mean_terminal_reward,
                    report.rows.len()
                );
            }
            Ok(())
        },
    )
}

/// Optimize the policy directly on the preference pairs.
pub fn dpo(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg.dpo_effective();
    let hash = config_hash("dpo", &cfg);
    run_stage(
        ctx,
        "dpo",
        hash,
        &[POLICY_SFT, PREFS],
        &[POLICY_DPO, DPO_REPORT],
        move |ctx| {
            let reference = load_policy(ctx, POLICY_SFT)?;
            let mut policy = reference.clone();
            let pairs: Vec<PreferencePair> = read_jsonl(&ctx.path(PREFS))?;
            let vocab = Vocabulary::new();
            let report = dpo_train(&mut policy, &reference, &vocab, &pairs, &cfg)?;
            save_checkpoint(
                &ctx.path(POLICY_DPO),
                &policy.to_checkpoint(cfg.epochs as u64, cfg.seed),
            )?;
            write_json(&ctx.path(DPO_REPORT), &report)?;
            println!(
                "[dpo] mean Δ {:.4} → {:.4}",
                report.mean_delta_before, report.mean_delta_after
            );
            Ok(())
        },
    )
}

fn policy_file(policy: &str) -> Result<&'static str> {
    match policy {
        "sft" => Ok(POLICY_SFT),
        "ppo" => Ok(POLICY_PPO),
        "dpo" => Ok(POLICY_DPO),
        other => Err(CliError::Config(format!(
            "unknown policy {other:?} (sft|ppo|dpo)"
        ))),
    }
}

/// Evaluate checkpoints on the held-out tasks. Without filters this runs
/// the four headline combinations; `--policy`/`--mode` narrow them, and
/// giving both selects exactly that combination.
pub fn eval(ctx: &mut Ctx, policy: Option<&str>, mode: Option<&str>) -> Result<()> {
    let combos: Vec<(String, String)> = match (policy, mode) {
        (Some(p), Some(m)) => vec![(p.to_string(), m.to_string())],
        _ => REPORT_COMBOS
            .iter()
            .filter(|(p, m)| {
                policy.map_or(true, |want| want == *p) && mode.map_or(true, |want| want == *m)
            })
            .map(|(p, m)| (p.to_string(), m.to_string()))
            .collect(),
    };
    if combos.is_empty() {
        return Err(CliError::Config(
            "no evaluation selected; the headline combinations are sft:greedy, sft:cot, \
             ppo:greedy, dpo:greedy"
                .into(),
        ));
    }
    for (p, m) in &combos {
        eval_combo(ctx, p, m)?;
    }
    Ok(())
}

fn eval_combo(ctx: &mut Ctx, p: &str, m: &str) -> Result<()> {
    let mode = match m {
        "greedy" => EvalMode::Greedy,
        "cot" => EvalMode::CoTDecode { k: ctx.cfg.cot.k },
        other => {
            return Err(CliError::Config(format!(
                "unknown eval mode {other:?} (greedy|cot)"
            )))
        }
    };
    let cfg = ctx.cfg.eval_config(mode);
    let name = format!("eval:{p}:{m}");
    let json_file = eval_json(p, m);
    let csv_file = reliability_csv(p, m);
    let checkpoint = policy_file(p)?;
    let hash = config_hash(&name, &cfg);
    run_stage(
        ctx,
        &name,
        hash,
        &[TASKS_EVAL, checkpoint],
        &[&json_file, &csv_file],
        |ctx| {
            let tasks: Vec<Task> = read_jsonl(&ctx.path(TASKS_EVAL))?;
            let policy = load_policy(ctx, checkpoint)?;
            let outcome = evaluate_policy(&policy, &Vocabulary::new(), &tasks, &cfg)?;
            write_json(&ctx.path(&json_file), &outcome)?;
            fs::write(
                ctx.path(&csv_file),
                outcome.calibration.to_reliability_csv(),
            )?;
            println!(
                "[{name}] accuracy {:.4}, ece {:.4} on {} tasks",
                outcome.summary.accuracy, outcome.summary.ece, outcome.summary.n
            );
            Ok(())
        },
    )
}

/// Aggregate the four headline evaluations into one comparison table.
pub fn report(ctx: &mut Ctx) -> Result<()> {
    let inputs: Vec<String> = REPORT_COMBOS.iter().map(|(p, m)| eval_json(p, m)).collect();
    let input_refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    let hash = config_hash("report", &serde_json::json!({ "combos": REPORT_COMBOS }));
    run_stage(ctx, "report", hash, &input_refs, &[REPORT_FILE], |ctx| {
        let mut rows = Vec::with_capacity(REPORT_COMBOS.len());
        for (p, m) in REPORT_COMBOS {
            let outcome: EvalOutcome = read_json(&ctx.path(&eval_json(p, m)))?;
            rows.push(ReportRow {
                policy: p.to_string(),
                mode: outcome.summary.mode.clone(),
                k: outcome.summary.k,
                accuracy: outcome.summary.accuracy,
                ece: outcome.summary.ece,
                n: outcome.summary.n,
            });
        }
        let report = PipelineReport { rows };
        write_json(&ctx.path(REPORT_FILE), &report)?;
        println!(
            "{:<8} {:<16} {:>8}  {:>8}",
            "policy", "mode", "accuracy", "ece"
        );
        for r in &report.rows {
            let mode = match r.k {
                Some(k) => format!("{} (K={k})", r.mode),
                None => r.mode.clone(),
            };
            println!(
                "{:<8} {:<16} {:>8.4}  {:>8.4}",
                r.policy, mode, r.accuracy, r.ece
            );
        }
        Ok(())
    })
}

/// Every stage in order, honoring up-to-date skips.
pub fn pipeline(ctx: &mut Ctx) -> Result<()> {
    gen_corpus(ctx)?;
    sft(ctx)?;
    cot_decode_stage(ctx)?;
    build_prefs(ctx)?;
    train_rm(ctx)?;
    ppo(ctx, None)?;
    dpo(ctx)?;
    eval(ctx, None, None)?;
    report(ctx)
}
