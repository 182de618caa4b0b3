//! Direct preference optimisation with label smoothing.
//!
//! Per pair, `Δ = β·[(log π_θ(h¹|q) − log π_ref(h¹|q)) − (log π_θ(h²|q) −
//! log π_ref(h²|q))]` with sequence log-probabilities summed (unnormalized)
//! over response tokens, and `loss = −(1−ε_s)·log σ(Δ) − ε_s·log σ(−Δ)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::policy::adam::AdamState;
use crate::policy::model::{self};
use crate::policy::Policy;
use crate::preference::PreferencePair;
use crate::reward_model::tokenize_pair;
use crate::rng::rng_from;
use crate::vocab::{TokenSeq, Vocabulary};

/// DPO hyperparameters. Defaults follow the reference experiment table:
/// lr 5e-5, 5 epochs, β 0.2, label smoothing 0.01.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DPOConfig {
    pub lr: f64,
    pub epochs: usize,
    pub beta: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DPOConfig {
    fn default() -> Self {
        DPOConfig {
            lr: 5e-5,
            epochs: 5,
            beta: 0.2,
            label_smoothing: 0.01,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl DPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config("dpo β must be > 0".into()));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config(
                "dpo label smoothing must lie in [0, 0.5)".into(),
            ));
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "dpo needs lr > 0, epochs ≥ 1, batch_size ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// One tokenized preference pair: both full sequences share the first
/// `prompt_len` tokens.
#[derive(Debug, Clone)]
pub struct DpoItem {
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    pub prompt_len: usize,
}

impl DpoItem {
    pub fn from_pair(vocab: &Vocabulary, pair: &PreferencePair) -> Result<DpoItem> {
        let prompt_len = vocab.encode_prompt(&pair.prompt)?.len();
        let (chosen, rejected) = tokenize_pair(vocab, pair)?;
        Ok(DpoItem {
            chosen,
            rejected,
            prompt_len,
        })
    }
}

/// The scaled log-ratio gap from the four sequence log-probability sums.
/// Only the θ−ref differences matter: adding a per-sequence constant to
/// both the policy and reference log-probs of the same hypothesis cancels.
pub fn dpo_delta(
    logp_chosen: f64,
    ref_logp_chosen: f64,
    logp_rejected: f64,
    ref_logp_rejected: f64,
    beta: f64,
) -> f64 {
    beta * ((logp_chosen - ref_logp_chosen) - (logp_rejected - ref_logp_rejected))
}

/// `−(1−ε_s)·log σ(Δ) − ε_s·log σ(−Δ)`; ε_s = 0 is the plain DPO loss.
pub fn smoothed_loss_from_delta(delta: f64, label_smoothing: f64) -> f64 {
    (1.0 - label_smoothing) * math::softplus(-delta) + label_smoothing * math::softplus(delta)
}

fn response_logprob_sum(policy: &Policy, tokens: &[u32], prompt_len: usize) -> Result<f64> {
    Ok(policy.sequence_log_probs(tokens, prompt_len)?.iter().sum())
}

fn item_delta(policy: &Policy, reference: &Policy, item: &DpoItem, beta: f64) -> Result<f64> {
    Ok(dpo_delta(
        response_logprob_sum(policy, &item.chosen, item.prompt_len)?,
        response_logprob_sum(reference, &item.chosen, item.prompt_len)?,
        response_logprob_sum(policy, &item.rejected, item.prompt_len)?,
        response_logprob_sum(reference, &item.rejected, item.prompt_len)?,
        beta,
    ))
}

/// Smoothed DPO loss of a single pair under a frozen reference policy.
pub fn dpo_loss(
    policy: &Policy,
    reference: &Policy,
    item: &DpoItem,
    beta: f64,
    label_smoothing: f64,
) -> Result<f64> {
    Ok(smoothed_loss_from_delta(
        item_delta(policy, reference, item, beta)?,
        label_smoothing,
    ))
}

/// Mean smoothed DPO loss over `items`, with its gradient with respect to
/// the policy parameters accumulated into `grad`.
pub fn dpo_loss_and_grad(
    policy: &Policy,
    reference: &Policy,
    items: &[DpoItem],
    beta: f64,
    label_smoothing: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyInput("dpo items"));
    }
    let layout = policy.layout();
    let d = layout.cfg.d_model;
    let v = layout.cfg.vocab_size;
    let w = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    let mut logits = vec![0.0; v];
    let mut logp = vec![0.0; v];
    for item in items {
        let delta = item_delta(policy, reference, item, beta)?;
        loss += w * smoothed_loss_from_delta(delta, label_smoothing);
        // dL/dΔ = −(1−ε_s)·σ(−Δ) + ε_s·σ(Δ)
        let d_delta = -(1.0 - label_smoothing) * math::sigmoid(-delta)
            + label_smoothing * math::sigmoid(delta);
        for (tokens, sign) in [(&item.chosen, 1.0), (&item.rejected, -1.0)] {
            let coef = w * d_delta * beta * sign;
            let cache = model::run_forward(layout, &policy.params, tokens)?;
            let mut d_hidden = vec![0.0; cache.len() * d];
            for t in item.prompt_len..tokens.len() {
                let pos = t - 1;
                model::logits_into(layout, &policy.params, &cache, pos, &mut logits);
                math::log_softmax(&logits, &mut logp);
                // d log π(a|s) / d z = one-hot(a) − softmax(z)
                let mut d_logits: Vec<f64> = logp.iter().map(|&lp| -coef * lp.exp()).collect();
                d_logits[tokens[t] as usize] += coef;
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
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "dpo loss".into(),
        });
    }
    Ok(loss)
}

/// Mean Δ over `items` — positive once the policy prefers the chosen
/// hypotheses relative to the reference.
pub fn mean_delta(
    policy: &Policy,
    reference: &Policy,
    items: &[DpoItem],
    beta: f64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyInput("dpo items"));
    }
    let mut sum = 0.0;
    for item in items {
        sum += item_delta(policy, reference, item, beta)?;
    }
    Ok(sum / items.len() as f64)
}

/// Loss trajectory plus the mean Δ before and after training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoReport {
    pub epoch_losses: Vec<f64>,
    pub mean_delta_before: f64,
    pub mean_delta_after: f64,
}

/// Fine-tune `policy` on preference pairs against a frozen reference
/// (typically a clone of the starting policy) with minibatch Adam steps.
pub fn dpo_train(
    policy: &mut Policy,
    reference: &Policy,
    vocab: &Vocabulary,
    pairs: &[PreferencePair],
    cfg: &DPOConfig,
) -> Result<DpoReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("dpo preference pairs"));
    }
    let items: Vec<DpoItem> = pairs
        .iter()
        .map(|p| DpoItem::from_pair(vocab, p))
        .collect::<Result<_>>()?;
    let mean_delta_before = mean_delta(policy, reference, &items, cfg.beta)?;
    let mut opt = AdamState::new(policy.params.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, "dpo.epoch", &[epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<DpoItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let mut grad = vec![0.0; policy.params.len()];
            let loss = dpo_loss_and_grad(
                policy,
                reference,
                &batch,
                cfg.beta,
                cfg.label_smoothing,
                &mut grad,
            )?;
            opt.step(&mut policy.params, &grad, cfg.lr);
            loss_sum += loss * chunk.len() as f64;
        }
        epoch_losses.push(loss_sum / items.len() as f64);
    }
    let mean_delta_after = mean_delta(policy, reference, &items, cfg.beta)?;
    Ok(DpoReport {
        epoch_losses,
        mean_delta_before,
        mean_delta_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::gradcheck::{check_coordinates, FD_TOL};
    use crate::policy::model::ModelConfig;
    use crate::preference::PairMeta;
    use rand::Rng;

    fn tiny_policy(seed: u64) -> Policy {
        Policy::init(
            ModelConfig {
                vocab_size: Vocabulary::new().size(),
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                context_len: 64,
            },
            seed,
        )
        .unwrap()
    }

    fn toy_pairs(n: usize) -> Vec<PreferencePair> {
        assert!(n <= 9);
        (0..n)
            .map(|i| PreferencePair {
                prompt: format!("Q: {} + {}\nA:", i, i + 1),
                chosen: format!(" So the answer is 1{i}."),
                rejected: format!(" So the answer is 9{i}."),
                gap: 0.3,
                meta: PairMeta {
                    k_chosen: 0,
                    k_rejected: 5,
                    c_chosen: 0.5,
                    c_rejected: 0.2,
                },
            })
            .collect()
    }

    #[test]
    fn smoothed_loss_worked_values() {
        // Δ = 0 ⇒ ln 2 regardless of smoothing
        for eps in [0.0, 0.01, 0.3] {
            assert!((smoothed_loss_from_delta(0.0, eps) - std::f64::consts::LN_2).abs() < 1e-15);
        }
        // Δ = 1, ε_s = 0.01 ⇒ 0.99·ln(1+e⁻¹) + 0.01·ln(1+e) = 0.3232617
        let oracle = 0.99 * (1.0 + (-1.0f64).exp()).ln() + 0.01 * (1.0 + 1.0f64.exp()).ln();
        let loss = smoothed_loss_from_delta(1.0, 0.01);
        assert!((loss - oracle).abs() < 1e-15);
        assert!((loss - 0.3232617).abs() < 1e-7, "{loss}");
        // ε_s = 0 reduces to −log σ(Δ)
        let delta = 0.37;
        assert!((smoothed_loss_from_delta(delta, 0.0) - math::softplus(-delta)).abs() < 1e-15);
    }

    #[test]
    fn delta_ignores_shared_per_sequence_constants() {
        let mut rng = rng_from(2, "test.dpo-delta", &[]);
        for _ in 0..20 {
            let (a, b, x, y) = (
                rng.gen_range(-30.0..0.0),
                rng.gen_range(-30.0..0.0),
                rng.gen_range(-30.0..0.0),
                rng.gen_range(-30.0..0.0),
            );
            let (c, k) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let base = dpo_delta(a, b, x, y, 0.2);
            let shifted = dpo_delta(a + c, b + c, x + k, y + k, 0.2);
            assert!((base - shifted).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_policy_and_reference_give_ln2_loss() {
        let policy = tiny_policy(1);
        let vocab = Vocabulary::new();
        for pair in toy_pairs(3) {
            let item = DpoItem::from_pair(&vocab, &pair).unwrap();
            let loss = dpo_loss(&policy, &policy, &item, 0.2, 0.01).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn dpo_gradient_matches_central_differences_everywhere() {
        let policy = tiny_policy(2);
        let reference = tiny_policy(3);
        let vocab = Vocabulary::new();
        let items: Vec<DpoItem> = toy_pairs(2)
            .iter()
            .map(|p| DpoItem::from_pair(&vocab, p).unwrap())
            .collect();
        let mut grad = vec![0.0; policy.params.len()];
        dpo_loss_and_grad(&policy, &reference, &items, 0.2, 0.01, &mut grad).unwrap();

        let cfg = *policy.cfg();
        let reference2 = reference.clone();
        let items2 = items.clone();
        let mut params = policy.params.clone();
        let indices: Vec<usize> = (0..params.len()).collect();
        let report = check_coordinates(&mut params, &grad, &indices, move |p| {
            let probe = Policy::from_params(cfg, p.to_vec())?;
            let mut sum = 0.0;
            for item in &items2 {
                sum += dpo_loss(&probe, &reference2, item, 0.2, 0.01)?;
            }
            Ok(sum / items2.len() as f64)
        })
        .unwrap();
        assert!(
            report.max_error <= FD_TOL,
            "worst coordinate {} error {}",
            report.worst_index,
            report.max_error
        );
    }

    #[test]
    fn training_raises_mean_delta_above_zero() {
        let base = tiny_policy(4);
        let reference = base.clone();
        let vocab = Vocabulary::new();
        let pairs = toy_pairs(6);
        let cfg = DPOConfig {
            lr: 2e-3,
            epochs: 8,
            batch_size: 3,
            seed: 7,
            ..DPOConfig::default()
        };
        let mut policy = base.clone();
        let report = dpo_train(&mut policy, &reference, &vocab, &pairs, &cfg).unwrap();
        assert!(report.mean_delta_before.abs() < 1e-12);
        assert!(
            report.mean_delta_after > 0.0,
            "Δ after training: {}",
            report.mean_delta_after
        );
        assert_eq!(report.epoch_losses.len(), 8);
        assert!(
            report.epoch_losses.last().unwrap() < &report.epoch_losses[0],
            "{:?}",
            report.epoch_losses
        );

        // determinism: a rerun from the same starting point is bit-identical
        let mut policy2 = base.clone();
        let report2 = dpo_train(&mut policy2, &reference, &vocab, &pairs, &cfg).unwrap();
        for (a, b) in policy.params.iter().zip(&policy2.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(
            report.mean_delta_after.to_bits(),
            report2.mean_delta_after.to_bits()
        );
    }

    #[test]
    fn empty_pair_set_is_rejected() {
        let base = tiny_policy(5);
        let reference = base.clone();
        let vocab = Vocabulary::new();
        let mut policy = base.clone();
        match dpo_train(&mut policy, &reference, &vocab, &[], &DPOConfig::default()) {
            Err(Error::EmptyInput(_)) => {}
            other => panic!("expected EmptyInput, got {other:?}"),
        }
    }
}
