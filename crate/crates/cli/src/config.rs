//! Run configuration: one TOML file drives every pipeline stage.
//!
//! The file has a handful of top-level keys and one section per stage.
//! Only `out_dir` is mandatory; every other key falls back to the
//! reference defaults (learning rate 5e-5, 5 epochs, K = 10 branches,
//! γ = 0.98, λ = 0.95, β_KL = 0.05, clip 0.2, DPO β = 0.2 with label
//! smoothing 0.01, B = 10 calibration bins). Overriding one of those
//! pinned values is allowed but produces a warning so ablations are
//! visible in the logs.
//!
//! Seeding: every stage runs from an *effective* seed derived from the
//! top-level `seed`, the stage name, and the stage section's own `seed`
//! field (default 0). Changing the run seed re-rolls everything;
//! changing a section seed re-rolls just that stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rlsf_core::corpus::CorpusOptions;
use rlsf_core::cot_decode::CotConfig;
use rlsf_core::eval::{ConfidenceAggregation, EvalConfig, EvalMode};
use rlsf_core::policy::SftConfig;
use rlsf_core::preference::PairStrategy;
use rlsf_core::reward_model::RewardConfig;
use rlsf_core::rl::{DPOConfig, PPOConfig};
use rlsf_core::rng::derive_seed;
use rlsf_core::{ModelConfig, Vocabulary};

use crate::error::{CliError, Result};

/// Top-level run configuration (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed every stage seed is derived from.
    #[serde(default)]
    pub seed: u64,
    /// Directory all artifacts are written to (created if absent).
    pub out_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub cot: CotConfig,
    #[serde(default)]
    pub pairs: PairsSection,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub ppo: PPOConfig,
    #[serde(default)]
    pub dpo: DPOConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Corpus sizes and task mix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Supervised examples.
    pub n_sft: usize,
    /// Prompts decoded for self-feedback preferences and PPO rollouts.
    pub n_rlsf: usize,
    /// Held-out evaluation tasks (prompts disjoint from the two sets above).
    pub n_eval: usize,
    /// Fraction of supervised targets rendered as reasoning traces.
    pub reasoning_ratio: f64,
    pub multiple_choice_fraction: f64,
    pub difficulties: Vec<u8>,
    pub n_options: usize,
    /// Fraction of trace targets prefixed with one stray character so the
    /// policy learns to recover from improbable first tokens.
    pub noise_prefix_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let opts = CorpusOptions::default();
        CorpusSection {
            n_sft: 2000,
            n_rlsf: 500,
            n_eval: 200,
            reasoning_ratio: 0.5,
            multiple_choice_fraction: opts.multiple_choice_fraction,
            difficulties: opts.difficulties,
            n_options: opts.n_options,
            noise_prefix_fraction: opts.noise_prefix_fraction,
        }
    }
}

impl CorpusSection {
    pub fn options(&self) -> CorpusOptions {
        CorpusOptions {
            multiple_choice_fraction: self.multiple_choice_fraction,
            difficulties: self.difficulties.clone(),
            n_options: self.n_options,
            noise_prefix_fraction: self.noise_prefix_fraction,
        }
    }
}

/// Transformer dimensions; the vocabulary (and hence `vocab_size`) is fixed
/// by the tokenizer and not configurable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let cfg = ModelConfig::default();
        ModelSection {
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            context_len: cfg.context_len,
        }
    }
}

/// How preference pairs are drawn from each prompt's ranked hypotheses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsSection {
    /// "all_pairs" (every ranked pair with gap ≥ min_gap) or "best_worst".
    pub strategy: String,
    /// Minimum confidence gap (all_pairs only).
    pub min_gap: f64,
    /// Keep at most this many pairs per prompt; 0 = unlimited.
    pub max_per_prompt: usize,
}

impl Default for PairsSection {
    fn default() -> Self {
        PairsSection {
            strategy: "all_pairs".to_string(),
            min_gap: 0.05,
            max_per_prompt: 0,
        }
    }
}

/// Evaluation knobs shared by all four headline evaluations; the answer
/// probe comes from the `[cot]` section so decoding and grading agree.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Calibration bin count B.
    pub bins: usize,
    pub aggregation: ConfidenceAggregation,
    pub max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let cfg = EvalConfig::default();
        EvalSection {
            bins: cfg.bins,
            aggregation: cfg.aggregation,
            max_new_tokens: cfg.max_new_tokens,
        }
    }
}

impl RunConfig {
    /// Parse and validate a TOML run configuration.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize back to TOML (the snapshot written into the run directory).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("serialize config: {e}")))
    }

    fn validate(&self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            return Err(CliError::Config("out_dir must not be empty".into()));
        }
        let c = &self.corpus;
        if c.n_sft == 0 || c.n_rlsf == 0 || c.n_eval == 0 {
            return Err(CliError::Config("corpus sizes must all be ≥ 1".into()));
        }
        self.pair_strategy()?;
        if self.eval.bins == 0 {
            return Err(CliError::Config("eval.bins must be ≥ 1".into()));
        }
        if self.eval.max_new_tokens == 0 {
            return Err(CliError::Config("eval.max_new_tokens must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: Vocabulary::new().size(),
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            context_len: self.model.context_len,
        }
    }

    pub fn pair_strategy(&self) -> Result<PairStrategy> {
        match self.pairs.strategy.as_str() {
            "all_pairs" => Ok(PairStrategy::AllPairs {
                min_gap: self.pairs.min_gap,
            }),
            "best_worst" => Ok(PairStrategy::BestWorst),
            other => Err(CliError::Config(format!(
                "pairs.strategy must be \"all_pairs\" or \"best_worst\", got {other:?}"
            ))),
        }
    }

    /// Seed for the policy's parameter initialization.
    pub fn model_init_seed(&self) -> u64 {
        derive_seed(self.seed, "cli.model.init", &[])
    }

    /// Seed for one of the three generated corpora ("sft"/"rlsf"/"eval").
    pub fn corpus_seed(&self, which: &str) -> u64 {
        derive_seed(
            self.seed,
            "cli.corpus",
            &[match which {
                "sft" => 0,
                "rlsf" => 1,
                "eval" => 2,
                other => unreachable!("unknown corpus {other}"),
            }],
        )
    }

    pub fn sft_effective(&self) -> SftConfig {
        let mut cfg = self.sft.clone();
        cfg.seed = derive_seed(self.seed, "cli.stage.sft", &[self.sft.seed]);
        cfg
    }

    pub fn reward_effective(&self) -> RewardConfig {
        let mut cfg = self.reward.clone();
        cfg.seed = derive_seed(self.seed, "cli.stage.reward", &[self.reward.seed]);
        cfg
    }

    /// Effective PPO configuration, honoring a `--gamma` override.
    pub fn ppo_effective(&self, gamma_override: Option<f64>) -> PPOConfig {
        let mut cfg = self.ppo.clone();
        if let Some(gamma) = gamma_override {
            cfg.gamma = gamma;
        }
        cfg.seed = derive_seed(self.seed, "cli.stage.ppo", &[self.ppo.seed]);
        cfg
    }

    pub fn dpo_effective(&self) -> DPOConfig {
        let mut cfg = self.dpo.clone();
        cfg.seed = derive_seed(self.seed, "cli.stage.dpo", &[self.dpo.seed]);
        cfg
    }

    /// Evaluation configuration for one mode, reusing the decode probe.
    pub fn eval_config(&self, mode: EvalMode) -> EvalConfig {
        EvalConfig {
            mode,
            bins: self.eval.bins,
            aggregation: self.eval.aggregation,
            max_new_tokens: self.eval.max_new_tokens,
            probe: self.cot.probe.clone(),
        }
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config sections are plain data")
}

/// Warnings for values that differ from the pinned reference defaults.
/// Covers exactly the fields the reference hyperparameter tables fix;
/// free knobs (batch sizes, iteration counts, token budgets, seeds) stay
/// silent.
pub fn default_override_warnings(cfg: &RunConfig, ppo_gamma_override: Option<f64>) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut check =
        |section: &str, keys: &[&str], cur: serde_json::Value, def: serde_json::Value| {
            for key in keys {
                let (c, d) = (&cur[key], &def[key]);
                if c != d {
                    warnings.push(format!(
                        "[{section}] {key} = {c} overrides the reference default {d}"
                    ));
                }
            }
        };

    let mut ppo = cfg.ppo.clone();
    if let Some(gamma) = ppo_gamma_override {
        ppo.gamma = gamma;
    }
    check(
        "sft",
        &["lr", "epochs"],
        to_value(&cfg.sft),
        to_value(&SftConfig::default()),
    );
    check(
        "cot",
        &["k"],
        to_value(&cfg.cot),
        to_value(&CotConfig::default()),
    );
    check(
        "reward",
        &["lr", "epochs"],
        to_value(&cfg.reward),
        to_value(&RewardConfig::default()),
    );
    check(
        "ppo",
        &[
            "lr",
            "epochs",
            "exploration_temperature",
            "kl_coefficient",
            "clip",
            "gamma",
            "lambda",
        ],
        to_value(&ppo),
        to_value(&PPOConfig::default()),
    );
    check(
        "dpo",
        &["lr", "epochs", "beta", "label_smoothing"],
        to_value(&cfg.dpo),
        to_value(&DPOConfig::default()),
    );
    check(
        "eval",
        &["bins"],
        to_value(&cfg.eval),
        to_value(&EvalSection::default()),
    );
    warnings
}
