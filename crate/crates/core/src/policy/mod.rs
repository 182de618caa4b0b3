//! Autoregressive character-level policy: distribution queries, greedy
//! decoding, sequence scoring, and supervised fine-tuning.
//!
//! A [`Policy`] is a transformer backbone plus a language-model head over a
//! flat parameter vector. Incremental generation goes through [`PolicyRun`],
//! which wraps the same forward pass used for training, so decoded
//! probabilities are bit-identical to training-time probabilities.

pub mod adam;
pub mod gradcheck;
pub mod model;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_VERSION};
use crate::corpus::SftExample;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::rng_from;
use crate::vocab::{TokenSeq, Vocabulary};

use adam::AdamState;
use model::{Cache, HeadKind, Layout, ModelConfig};

/// Language model with a flat `f64` parameter vector.
#[derive(Debug, Clone)]
pub struct Policy {
    layout: Layout,
    pub params: Vec<f64>,
}

impl Policy {
    /// Freshly initialized policy for `cfg`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Policy> {
        cfg.validate()?;
        let layout = Layout::new(cfg, HeadKind::LanguageModel);
        let params = model::init_params(&layout, seed);
        Ok(Policy { layout, params })
    }

    /// Freshly initialized policy at the reference configuration.
    pub fn reference(seed: u64) -> Policy {
        Policy::init(ModelConfig::default(), seed).expect("reference config is valid")
    }

    /// Wrap an existing parameter vector.
    pub fn from_params(cfg: ModelConfig, params: Vec<f64>) -> Result<Policy> {
        cfg.validate()?;
        let layout = Layout::new(cfg, HeadKind::LanguageModel);
        if params.len() != layout.total_len() {
            return Err(Error::Config(format!(
                "parameter vector length {} does not match architecture (expected {})",
                params.len(),
                layout.total_len()
            )));
        }
        Ok(Policy { layout, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.layout.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Begin an incremental run (empty context).
    pub fn start(&self) -> PolicyRun<'_> {
        PolicyRun {
            policy: self,
            cache: Cache::new(&self.layout.cfg),
        }
    }

    /// Next-token distribution after `prefix` at temperature 1. The result
    /// is a proper distribution: sums to 1 (±1e-9) with every entry > 0.
    pub fn next_token_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::EmptyInput("next_token_distribution prefix"));
        }
        let mut run = self.start();
        run.push_all(prefix)?;
        Ok(run.next_distribution())
    }

    /// Greedy decoding: repeatedly take the argmax token (ties resolved to
    /// the lowest id) until `<eos>`, `max_new_tokens`, or the context limit.
    /// Returns only the generated tokens, including the final `<eos>` when
    /// one was produced.
    pub fn greedy_decode(&self, prompt: &[u32], max_new_tokens: usize) -> Result<TokenSeq> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("greedy_decode prompt"));
        }
        let eos = Vocabulary::new().eos_id;
        let mut run = self.start();
        run.push_all(prompt)?;
        let mut out = TokenSeq::default();
        for _ in 0..max_new_tokens {
            if run.len() >= self.layout.cfg.context_len {
                break;
            }
            let logits = run.next_logits();
            let tok = math::argmax_tie_lowest(&logits) as u32;
            run.push(tok)?;
            out.push(tok);
            if tok == eos {
                break;
            }
        }
        Ok(out)
    }

    /// Log-probability of each response token under the policy:
    /// `log π(tokens[t] | tokens[..t])` for `t` in `prompt_len..len`, at
    /// temperature 1.
    pub fn sequence_log_probs(&self, tokens: &[u32], prompt_len: usize) -> Result<Vec<f64>> {
        if prompt_len == 0 || prompt_len >= tokens.len() {
            return Err(Error::PromptRange {
                prompt_len,
                seq_len: tokens.len(),
            });
        }
        let cache = model::run_forward(&self.layout, &self.params, tokens)?;
        let v = self.layout.cfg.vocab_size;
        let mut logits = vec![0.0; v];
        let mut logp = vec![0.0; v];
        let mut out = Vec::with_capacity(tokens.len() - prompt_len);
        for t in prompt_len..tokens.len() {
            model::logits_into(&self.layout, &self.params, &cache, t - 1, &mut logits);
            math::log_softmax(&logits, &mut logp);
            out.push(logp[tokens[t] as usize]);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Policy,
            arch: self.layout.cfg,
            vocab: Vocabulary::new().tokens().to_vec(),
            step,
            seed,
            scale: None,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Policy> {
        ckpt.validate()?;
        if ckpt.kind != CheckpointKind::Policy {
            return Err(Error::Checkpoint("expected a policy checkpoint".into()));
        }
        Policy::from_params(ckpt.arch, ckpt.params.clone())
    }
}

/// Incremental decoding/probing session over one growing context.
/// Cloning forks an independent branch sharing the prefix computation.
#[derive(Debug, Clone)]
pub struct PolicyRun<'a> {
    policy: &'a Policy,
    cache: Cache,
}

impl<'a> PolicyRun<'a> {
    pub fn push(&mut self, token: u32) -> Result<usize> {
        model::forward_pos(
            &self.policy.layout,
            &self.policy.params,
            &mut self.cache,
            token,
        )
    }

    pub fn push_all(&mut self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            self.push(t)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        self.cache.tokens()
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    /// Remaining room before the context window is full.
    pub fn remaining(&self) -> usize {
        self.policy.layout.cfg.context_len - self.cache.len()
    }

    /// Logits for the token following position `pos`.
    pub fn logits_at(&self, pos: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.policy.layout.cfg.vocab_size];
        model::logits_into(
            &self.policy.layout,
            &self.policy.params,
            &self.cache,
            pos,
            &mut out,
        );
        out
    }

    /// Logits for the next token (after everything pushed so far).
    pub fn next_logits(&self) -> Vec<f64> {
        debug_assert!(!self.cache.is_empty(), "push at least one token first");
        self.logits_at(self.cache.len() - 1)
    }

    /// Temperature-1 distribution over the next token.
    pub fn next_distribution(&self) -> Vec<f64> {
        let mut logits = self.next_logits();
        math::softmax_inplace(&mut logits);
        logits
    }

    /// Distribution over the next token at temperature `temp` (> 0).
    pub fn next_distribution_with_temp(&self, temp: f64) -> Result<Vec<f64>> {
        if !(temp > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {temp}"
            )));
        }
        let mut logits = self.next_logits();
        for l in logits.iter_mut() {
            *l /= temp;
        }
        math::softmax_inplace(&mut logits);
        Ok(logits)
    }
}

/// Draw an index from a categorical distribution.
pub fn sample_index<R: Rng>(dist: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(dist)
        .expect("softmax output is a valid weight vector")
        .sample(rng)
}

/// One tokenized training sequence: `<bos>` + prompt + target + `<eos>`,
/// with `prompt_len` marking where the target starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSequence {
    pub tokens: TokenSeq,
    pub prompt_len: usize,
}

impl TrainSequence {
    pub fn target_tokens(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }
}

/// Tokenize a supervised example into a [`TrainSequence`].
pub fn tokenize_example(vocab: &Vocabulary, ex: &SftExample) -> Result<TrainSequence> {
    let prompt = vocab.encode_prompt(&ex.prompt)?;
    let target = vocab.encode_response(&ex.target)?;
    let prompt_len = prompt.len();
    let tokens = prompt.concat(&target);
    if prompt_len >= tokens.len() {
        return Err(Error::PromptRange {
            prompt_len,
            seq_len: tokens.len(),
        });
    }
    Ok(TrainSequence { tokens, prompt_len })
}

/// Mean negative log-likelihood of the target tokens in `batch`, with the
/// gradient accumulated into `grad` (same layout as `policy.params`).
pub fn sft_loss_and_grad(
    policy: &Policy,
    batch: &[TrainSequence],
    grad: &mut [f64],
) -> Result<f64> {
    let layout = &policy.layout;
    let d = layout.cfg.d_model;
    let v = layout.cfg.vocab_size;
    let total: usize = batch.iter().map(|s| s.target_tokens()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("sft batch has no target tokens"));
    }
    let w = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut logits = vec![0.0; v];
    let mut logp = vec![0.0; v];
    for seq in batch {
        if seq.prompt_len == 0 || seq.prompt_len >= seq.tokens.len() {
            return Err(Error::PromptRange {
                prompt_len: seq.prompt_len,
                seq_len: seq.tokens.len(),
            });
        }
        let cache = model::run_forward(layout, &policy.params, &seq.tokens)?;
        let len = seq.tokens.len();
        let mut d_hidden = vec![0.0; len * d];
        for t in seq.prompt_len..len {
            let pos = t - 1;
            model::logits_into(layout, &policy.params, &cache, pos, &mut logits);
            math::log_softmax(&logits, &mut logp);
            let target = seq.tokens[t] as usize;
            loss -= w * logp[target];
            // d_logits = w · (softmax − one-hot)
            let mut d_logits: Vec<f64> = logp.iter().map(|&lp| w * lp.exp()).collect();
            d_logits[target] -= w;
            math::outer_acc(
                &mut grad[layout.head()],
                &d_logits,
                cache.hidden_row(pos, d),
            );
            math::matvec_t_acc(
                &policy.params[layout.head()],
                &d_logits,
                d,
                &mut d_hidden[pos * d..(pos + 1) * d],
            );
        }
        model::backward(layout, &policy.params, &cache, &d_hidden, grad);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "sft loss".into(),
        });
    }
    Ok(loss)
}

/// One supervised step: compute the batch loss and gradient, then apply an
/// Adam update. Returns the pre-update loss.
pub fn sft_step(
    policy: &mut Policy,
    opt: &mut AdamState,
    batch: &[TrainSequence],
    lr: f64,
) -> Result<f64> {
    let mut grad = vec![0.0; policy.params.len()];
    let loss = sft_loss_and_grad(policy, batch, &mut grad)?;
    opt.step(&mut policy.params, &grad, lr);
    Ok(loss)
}

/// Supervised fine-tuning hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lr: 5e-5,
            epochs: 5,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl SftConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "sft requires lr > 0, epochs ≥ 1, batch_size ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch mean NLL over target tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Fine-tune `policy` on `data` with per-epoch seeded reshuffling.
pub fn train_sft(
    policy: &mut Policy,
    data: &[TrainSequence],
    cfg: &SftConfig,
) -> Result<SftReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("sft data"));
    }
    let mut opt = AdamState::new(policy.params.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_from(cfg.seed, "sft.epoch", &[epoch as u64]));
        let mut nll_sum = 0.0;
        let mut tok_sum = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSequence> = chunk.iter().map(|&i| data[i].clone()).collect();
            let tokens: usize = batch.iter().map(|s| s.target_tokens()).sum();
            let loss = sft_step(policy, &mut opt, &batch, cfg.lr)?;
            nll_sum += loss * tokens as f64;
            tok_sum += tokens;
        }
        epoch_losses.push(nll_sum / tok_sum as f64);
    }
    Ok(SftReport {
        epoch_losses,
        steps: opt.steps_taken(),
    })
}
