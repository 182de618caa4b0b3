//! Bradley–Terry reward model over full sequences.
//!
//! The model is the policy backbone with a scalar head read at the final
//! token. Training minimizes `−log σ(R(q⊙chosen) − R(q⊙rejected))` on raw
//! scores; afterwards a fixed affine scale maps the raw training-score range
//! onto [-1, 1] (clamped), and that scale is frozen into the checkpoint.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, ScaleRange, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::math;
use crate::policy::adam::AdamState;
use crate::policy::model::{self, HeadKind, Layout};
use crate::policy::Policy;
use crate::preference::PreferencePair;
use crate::rng::rng_from;
use crate::vocab::{TokenSeq, Vocabulary};

/// Sequence scorer: transformer backbone + scalar head + optional scale.
#[derive(Debug, Clone)]
pub struct RewardModel {
    layout: Layout,
    pub params: Vec<f64>,
    scale: Option<ScaleRange>,
}

impl RewardModel {
    /// Initialize from a policy: the backbone is copied, the scalar head
    /// starts at zero (so every initial raw score is exactly 0).
    pub fn from_policy(policy: &Policy) -> RewardModel {
        let layout = Layout::new(*policy.cfg(), HeadKind::Scalar);
        let mut params = vec![0.0; layout.total_len()];
        let n = layout.backbone_len();
        params[..n].copy_from_slice(&policy.params[..n]);
        RewardModel {
            layout,
            params,
            scale: None,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn scale(&self) -> Option<ScaleRange> {
        self.scale
    }

    /// Restore an externally calibrated scale (e.g. when wiring models
    /// together in tests); normal training fits it via [`Self::fit_scale`].
    pub fn set_scale(&mut self, scale: ScaleRange) -> Result<()> {
        if !(scale.hi - scale.lo > 1e-9) {
            return Err(Error::DegenerateScale {
                lo: scale.lo,
                hi: scale.hi,
            });
        }
        self.scale = Some(scale);
        Ok(())
    }

    /// Unscaled head output at the final position of `tokens`.
    pub fn raw_score(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("reward model input"));
        }
        let cache = model::run_forward(&self.layout, &self.params, tokens)?;
        Ok(model::scalar_score(
            &self.layout,
            &self.params,
            &cache,
            cache.len() - 1,
        ))
    }

    /// Scaled score `2(x − lo)/(hi − lo) − 1`, clamped to [-1, 1]. Requires
    /// a fitted scale.
    pub fn score(&self, tokens: &[u32]) -> Result<f64> {
        let scale = self.scale.ok_or(Error::UnfittedScale)?;
        Ok(apply_scale(self.raw_score(tokens)?, scale))
    }

    /// Fit the scale so the raw scores of `sequences` span [-1, 1]; called
    /// once after training, then frozen.
    pub fn fit_scale(&mut self, sequences: &[TokenSeq]) -> Result<ScaleRange> {
        if sequences.is_empty() {
            return Err(Error::EmptyInput("scale calibration set"));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for seq in sequences {
            let s = self.raw_score(seq)?;
            lo = lo.min(s);
            hi = hi.max(s);
        }
        if !(hi - lo > 1e-9) {
            return Err(Error::DegenerateScale { lo, hi });
        }
        let scale = ScaleRange { lo, hi };
        self.scale = Some(scale);
        Ok(scale)
    }

    /// Parameters with the fitted scale folded into the scalar head, so the
    /// affine (unclamped) scaled score becomes a plain head read-out. Used to
    /// initialize a value function from the reward model.
    pub fn scale_folded_params(&self) -> Result<Vec<f64>> {
        let scale = self.scale.ok_or(Error::UnfittedScale)?;
        let d = self.layout.cfg.d_model;
        let mut params = self.params.clone();
        let head = self.layout.head();
        let k = 2.0 / (scale.hi - scale.lo);
        let b = params[head.start + d];
        for w in &mut params[head.start..head.start + d] {
            *w *= k;
        }
        params[head.start + d] = k * (b - scale.lo) - 1.0;
        Ok(params)
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Reward,
            arch: self.layout.cfg,
            vocab: Vocabulary::new().tokens().to_vec(),
            step,
            seed,
            scale: self.scale,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<RewardModel> {
        ckpt.validate()?;
        if ckpt.kind != CheckpointKind::Reward {
            return Err(Error::Checkpoint("expected a reward checkpoint".into()));
        }
        Ok(RewardModel {
            layout: Layout::new(ckpt.arch, HeadKind::Scalar),
            params: ckpt.params.clone(),
            scale: ckpt.scale,
        })
    }
}

fn apply_scale(x: f64, s: ScaleRange) -> f64 {
    (2.0 * (x - s.lo) / (s.hi - s.lo) - 1.0).clamp(-1.0, 1.0)
}

/// Tokenize a preference pair into the two full sequences the reward model
/// compares: `<bos>` + prompt + hypothesis + `<eos>`.
pub fn tokenize_pair(vocab: &Vocabulary, pair: &PreferencePair) -> Result<(TokenSeq, TokenSeq)> {
    let prompt = vocab.encode_prompt(&pair.prompt)?;
    let chosen = prompt.concat(&vocab.encode_response(&pair.chosen)?);
    let rejected = prompt.concat(&vocab.encode_response(&pair.rejected)?);
    Ok((chosen, rejected))
}

/// Mean Bradley–Terry loss `−log σ(R(chosen) − R(rejected))` over raw scores.
pub fn bt_loss(rm: &RewardModel, batch: &[(TokenSeq, TokenSeq)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("bt_loss batch"));
    }
    let mut loss = 0.0;
    for (chosen, rejected) in batch {
        let d = rm.raw_score(chosen)? - rm.raw_score(rejected)?;
        loss += math::softplus(-d);
    }
    Ok(loss / batch.len() as f64)
}

/// [`bt_loss`] plus its gradient, accumulated into `grad`.
pub fn bt_loss_and_grad(
    rm: &RewardModel,
    batch: &[(TokenSeq, TokenSeq)],
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("bt_loss batch"));
    }
    let layout = &rm.layout;
    let d = layout.cfg.d_model;
    let w = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (chosen, rejected) in batch {
        let cache_c = model::run_forward(layout, &rm.params, chosen)?;
        let cache_r = model::run_forward(layout, &rm.params, rejected)?;
        let s_c = model::scalar_score(layout, &rm.params, &cache_c, cache_c.len() - 1);
        let s_r = model::scalar_score(layout, &rm.params, &cache_r, cache_r.len() - 1);
        let diff = s_c - s_r;
        loss += w * math::softplus(-diff);
        // d loss / d diff = σ(diff) − 1
        let d_diff = w * (math::sigmoid(diff) - 1.0);
        for (cache, d_score) in [(&cache_c, d_diff), (&cache_r, -d_diff)] {
            let last = cache.len() - 1;
            let head = layout.head();
            let hidden = cache.hidden_row(last, d);
            // scalar head: grad_w += d_score · hidden, grad_b += d_score
            math::axpy(&mut grad[head.start..head.start + d], d_score, hidden);
            grad[head.start + d] += d_score;
            let mut d_hidden = vec![0.0; cache.len() * d];
            math::axpy(
                &mut d_hidden[last * d..(last + 1) * d],
                d_score,
                &rm.params[head.start..head.start + d],
            );
            model::backward(layout, &rm.params, cache, &d_hidden, grad);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "bradley-terry loss".into(),
        });
    }
    Ok(loss)
}

/// Reward-model training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lr: 5e-5,
            epochs: 5,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Loss trajectory and final training-set ranking accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub scale: ScaleRange,
}

/// Train a reward model from `policy`'s backbone on preference pairs, then
/// fit the score scale over all training sequences and freeze it.
pub fn train_reward_model(
    policy: &Policy,
    vocab: &Vocabulary,
    pairs: &[PreferencePair],
    cfg: &RewardConfig,
) -> Result<(RewardModel, RewardReport)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("preference pairs"));
    }
    if !(cfg.lr > 0.0) || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "reward training requires lr > 0, epochs ≥ 1, batch_size ≥ 1".into(),
        ));
    }
    let data: Vec<(TokenSeq, TokenSeq)> = pairs
        .iter()
        .map(|p| tokenize_pair(vocab, p))
        .collect::<Result<_>>()?;

    let mut rm = RewardModel::from_policy(policy);
    let mut opt = AdamState::new(rm.params.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, "rm.epoch", &[epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(TokenSeq, TokenSeq)> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut grad = vec![0.0; rm.params.len()];
            let loss = bt_loss_and_grad(&rm, &batch, &mut grad)?;
            opt.step(&mut rm.params, &grad, cfg.lr);
            loss_sum += loss * chunk.len() as f64;
        }
        epoch_losses.push(loss_sum / data.len() as f64);
    }

    let mut calibration: Vec<TokenSeq> = Vec::with_capacity(2 * data.len());
    for (c, r) in &data {
        calibration.push(c.clone());
        calibration.push(r.clone());
    }
    let scale = rm.fit_scale(&calibration)?;
    let train_accuracy = pairwise_accuracy(&rm, &data)?;
    Ok((
        rm,
        RewardReport {
            epoch_losses,
            train_accuracy,
            scale,
        },
    ))
}

/// Fraction of pairs ranked correctly by raw score; exact ties count ½.
pub fn pairwise_accuracy(rm: &RewardModel, pairs: &[(TokenSeq, TokenSeq)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("pairwise_accuracy pairs"));
    }
    let mut sum = 0.0;
    for (chosen, rejected) in pairs {
        let s_c = rm.raw_score(chosen)?;
        let s_r = rm.raw_score(rejected)?;
        sum += if s_c > s_r {
            1.0
        } else if s_c == s_r {
            0.5
        } else {
            0.0
        };
    }
    Ok(sum / pairs.len() as f64)
}

/// Terminal-only reward signal for a decoded response: zero everywhere
/// except the final response token, which receives the scaled score of the
/// whole sequence.
pub fn per_token_rewards(rm: &RewardModel, tokens: &[u32], prompt_len: usize) -> Result<Vec<f64>> {
    if prompt_len == 0 || prompt_len >= tokens.len() {
        return Err(Error::PromptRange {
            prompt_len,
            seq_len: tokens.len(),
        });
    }
    let mut rewards = vec![0.0; tokens.len() - prompt_len];
    *rewards.last_mut().expect("non-empty response") = rm.score(tokens)?;
    Ok(rewards)
}
