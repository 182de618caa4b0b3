//! `rlsf` — run the self-feedback pipeline stage by stage or end to end.
//!
//! Every subcommand takes `--config <file>` pointing at a TOML run
//! configuration whose `out_dir` receives all artifacts. Stages check the
//! manifest and skip themselves when configuration and inputs are
//! unchanged, so `rlsf pipeline -c run.toml` is safe to re-invoke.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 missing upstream
//! artifact, 4 numerical abort, 1 anything else. Set `RLSF_THREADS` to pin
//! the worker count (default: all cores).

mod config;
mod error;
mod manifest;
mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::default_override_warnings;
use crate::error::{CliError, Result};
use crate::stages::Ctx;

#[derive(Parser)]
#[command(
    name = "rlsf",
    version,
    about = "Self-feedback pipeline: corpus → SFT → CoT decode → preferences → reward model → PPO/DPO → eval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Run configuration (TOML).
    #[arg(short, long, value_name = "FILE")]
    config: PathBuf,
}

#[derive(Args)]
struct PpoArgs {
    #[command(flatten)]
    common: StageArgs,
    /// Override the discount factor, e.g. `--gamma 1.0` for the
    /// no-discount ablation.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: StageArgs,
    /// Restrict to one policy checkpoint.
    #[arg(long, value_parser = ["sft", "ppo", "dpo"])]
    policy: Option<String>,
    /// Restrict to one decoding mode.
    #[arg(long, value_parser = ["greedy", "cot"])]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the supervised, rollout, and held-out evaluation corpora.
    GenCorpus(StageArgs),
    /// Train the char-level policy from scratch on the supervised corpus.
    Sft(StageArgs),
    /// Branch-decode every rollout prompt and score hypothesis confidence.
    CotDecode(StageArgs),
    /// Assemble preference pairs from the decoded hypotheses.
    BuildPrefs(StageArgs),
    /// Train the pairwise reward model on the preference pairs.
    TrainRm(StageArgs),
    /// Optimize the policy against the reward model.
    Ppo(PpoArgs),
    /// Optimize the policy directly on the preference pairs.
    Dpo(StageArgs),
    /// Grade checkpoints on the held-out tasks (accuracy + calibration).
    Eval(EvalArgs),
    /// Aggregate the four headline evaluations into report.json.
    Report(StageArgs),
    /// Run every stage in order.
    Pipeline(StageArgs),
}

fn open(args: &StageArgs, gamma: Option<f64>) -> Result<Ctx> {
    let ctx = Ctx::new(&args.config)?;
    for warning in default_override_warnings(&ctx.cfg, gamma) {
        eprintln!("warning: {warning}");
    }
    Ok(ctx)
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(raw) = std::env::var("RLSF_THREADS") {
        let n: usize = raw.parse().map_err(|_| {
            CliError::Config(format!(
                "RLSF_THREADS must be a positive integer, got {raw:?}"
            ))
        })?;
        if n == 0 {
            return Err(CliError::Config("RLSF_THREADS must be ≥ 1".into()));
        }
        rlsf_core::par::set_thread_count(n);
    }
    match cli.command {
        Command::GenCorpus(a) => stages::gen_corpus(&mut open(&a, None)?),
        Command::Sft(a) => stages::sft(&mut open(&a, None)?),
        Command::CotDecode(a) => stages::cot_decode_stage(&mut open(&a, None)?),
        Command::BuildPrefs(a) => stages::build_prefs(&mut open(&a, None)?),
        Command::TrainRm(a) => stages::train_rm(&mut open(&a, None)?),
        Command::Ppo(a) => stages::ppo(&mut open(&a.common, a.gamma)?, a.gamma),
        Command::Dpo(a) => stages::dpo(&mut open(&a, None)?),
        Command::Eval(a) => stages::eval(
            &mut open(&a.common, None)?,
            a.policy.as_deref(),
            a.mode.as_deref(),
        ),
        Command::Report(a) => stages::report(&mut open(&a, None)?),
        Command::Pipeline(a) => stages::pipeline(&mut open(&a, None)?),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
