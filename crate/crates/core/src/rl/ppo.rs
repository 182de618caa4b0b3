//! PPO with a terminal reward, exact full-vocabulary KL penalty, and a
//! critic initialized from the reward model.
//!
//! One iteration is: sample rollouts at the exploration temperature against
//! a frozen snapshot (recording temperature-1 distributions for the
//! importance ratios and the KL term), fill advantages with GAE, then take
//! several epochs of clipped-surrogate policy steps and squared-error critic
//! steps over trajectory minibatches.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::ANSWER_PHRASE;
use crate::cot_decode::{disparity, identify_answer_span};
use crate::error::{Error, Result};
use crate::math;
use crate::par;
use crate::policy::adam::AdamState;
use crate::policy::model::{self, Layout};
use crate::policy::{sample_index, Policy};
use crate::reward_model::RewardModel;
use crate::rl::gae::gae;
use crate::rng::rng_from;
use crate::vocab::{TokenSeq, Vocabulary};

/// PPO hyperparameters. Defaults follow the reference experiment table:
/// lr 5e-5, 5 epochs, exploration temperature 0.7, β_KL 0.05, clip 0.2,
/// γ 0.98, λ 0.95.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PPOConfig {
    pub lr: f64,
    pub epochs: usize,
    pub exploration_temperature: f64,
    pub kl_coefficient: f64,
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Trajectories per optimizer step.
    pub minibatch_size: usize,
    pub iterations: usize,
    pub max_new_tokens: usize,
    /// Zero-mean/unit-variance advantages per iteration batch (logged in
    /// the report). Default on.
    pub normalize_advantages: bool,
    /// How many prompts feed the per-iteration disparity metric.
    pub disparity_eval_prompts: usize,
    pub seed: u64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            lr: 5e-5,
            epochs: 5,
            exploration_temperature: 0.7,
            kl_coefficient: 0.05,
            clip: 0.2,
            gamma: 0.98,
            lambda: 0.95,
            minibatch_size: 8,
            iterations: 10,
            max_new_tokens: 64,
            normalize_advantages: true,
            disparity_eval_prompts: 16,
            seed: 0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.exploration_temperature > 0.0) {
            return Err(Error::Config(
                "ppo lr and exploration temperature must be > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("ppo needs γ, λ ∈ [0,1]".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("ppo clip ε must lie in (0,1)".into()));
        }
        if self.kl_coefficient < 0.0 {
            return Err(Error::Config("ppo β_KL must be ≥ 0".into()));
        }
        if self.epochs == 0
            || self.minibatch_size == 0
            || self.iterations == 0
            || self.max_new_tokens == 0
        {
            return Err(Error::Config(
                "ppo epochs, minibatch_size, iterations, max_new_tokens must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled episode: prompt ⊙ response plus everything PPO needs per
/// response position. `rewards` is zero except the terminal entry; the
/// snapshot's full temperature-1 distributions back the exact KL term.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub prompt_len: usize,
    pub tokens: TokenSeq,
    /// log π_old(a_t|s_t) at temperature 1 (sampling used the exploration
    /// temperature; ratios are over the canonical policy).
    pub behavior_logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// π_old(·|s_t) at temperature 1, one full-vocabulary row per response
    /// position.
    pub old_dists: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn terminal_reward(&self) -> f64 {
        *self.rewards.last().expect("non-empty response")
    }

    /// Flatten into per-state surrogate items carrying the given advantages
    /// (typically the batch-normalized ones).
    pub fn surrogate_items(&self, advantages: &[f64]) -> Vec<SurrogateItem> {
        (0..self.response_len())
            .map(|t| SurrogateItem {
                context: TokenSeq::from_ids_unchecked(self.tokens[..self.prompt_len + t].to_vec()),
                action: self.tokens[self.prompt_len + t],
                advantage: advantages[t],
                old_dist: self.old_dists[t].clone(),
            })
            .collect()
    }
}

/// Value function sharing the reward-model architecture. Initialized from a
/// fitted reward model with the scale folded into the head so that, at step
/// 0, `V(full sequence) = score(full sequence)` wherever the clamp is
/// inactive; afterwards it trains independently.
#[derive(Debug, Clone)]
pub struct Critic {
    layout: Layout,
    pub params: Vec<f64>,
}

impl Critic {
    pub fn from_reward_model(rm: &RewardModel) -> Result<Critic> {
        Ok(Critic {
            layout: rm.layout().clone(),
            params: rm.scale_folded_params()?,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// V of a complete state (the head read-out after its last token).
    pub fn value_of(&self, state: &[u32]) -> Result<f64> {
        if state.is_empty() {
            return Err(Error::EmptyInput("critic state"));
        }
        let cache = model::run_forward(&self.layout, &self.params, state)?;
        Ok(model::scalar_score(
            &self.layout,
            &self.params,
            &cache,
            cache.len() - 1,
        ))
    }

    /// V(s_t) for every response position of `tokens` in one forward pass:
    /// s_t ends at absolute position `prompt_len + t − 1`.
    pub fn values_for(&self, tokens: &[u32], prompt_len: usize) -> Result<Vec<f64>> {
        if prompt_len == 0 || prompt_len >= tokens.len() {
            return Err(Error::PromptRange {
                prompt_len,
                seq_len: tokens.len(),
            });
        }
        let cache = model::run_forward(&self.layout, &self.params, tokens)?;
        Ok((prompt_len - 1..tokens.len() - 1)
            .map(|pos| model::scalar_score(&self.layout, &self.params, &cache, pos))
            .collect())
    }
}

/// Sample one episode per prompt at the exploration temperature. The policy
/// acts as the frozen snapshot π_old for this iteration: its temperature-1
/// distributions and log-probs are recorded per response position. The
/// terminal reward is the scaled reward-model score of the full sequence
/// (applied at the truncation point when the budget or context runs out);
/// values come from the critic. Prompts are processed in parallel against
/// the frozen parameters, seeded per (iteration, slot).
pub fn rollout(
    policy: &Policy,
    critic: &Critic,
    rm: &RewardModel,
    vocab: &Vocabulary,
    prompts: &[TokenSeq],
    cfg: &PPOConfig,
    iteration: u64,
) -> Result<Vec<Trajectory>> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("rollout prompts"));
    }
    par::par_map(prompts, |slot, prompt| {
        let mut rng = rng_from(cfg.seed, "ppo.rollout", &[iteration, slot as u64]);
        let mut run = policy.start();
        run.push_all(prompt)?;
        let mut behavior_logprobs = Vec::new();
        let mut old_dists = Vec::new();
        for _ in 0..cfg.max_new_tokens {
            if run.remaining() == 0 {
                break;
            }
            let canonical = run.next_distribution();
            let explore = run.next_distribution_with_temp(cfg.exploration_temperature)?;
            let action = sample_index(&explore, &mut rng) as u32;
            behavior_logprobs.push(canonical[action as usize].ln());
            old_dists.push(canonical);
            run.push(action)?;
            if action == vocab.eos_id {
                break;
            }
        }
        let tokens = TokenSeq::from_ids_unchecked(run.tokens().to_vec());
        let response_len = tokens.len() - prompt.len();
        let mut rewards = vec![0.0; response_len];
        *rewards.last_mut().expect("response has ≥1 token") = rm.score(&tokens)?;
        let values = critic.values_for(&tokens, prompt.len())?;
        Ok(Trajectory {
            prompt_len: prompt.len(),
            tokens,
            behavior_logprobs,
            rewards,
            values,
            advantages: Vec::new(),
            returns: Vec::new(),
            old_dists,
        })
    })
    .into_iter()
    .collect()
}

/// Fill `advantages` and `returns` via GAE with terminal bootstrap 0.
pub fn fill_gae(traj: &mut Trajectory, gamma: f64, lambda: f64) -> Result<()> {
    let (adv, ret) = gae(&traj.rewards, &traj.values, 0.0, gamma, lambda)?;
    traj.advantages = adv;
    traj.returns = ret;
    Ok(())
}

/// One (state, action, advantage) triple plus the frozen snapshot
/// distribution at that state.
#[derive(Debug, Clone)]
pub struct SurrogateItem {
    pub context: TokenSeq,
    pub action: u32,
    pub advantage: f64,
    pub old_dist: Vec<f64>,
}

/// The clipped objective term `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)`.
pub fn clipped_objective(rho: f64, advantage: f64, clip: f64) -> f64 {
    (rho * advantage).min(rho.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Whether the gradient flows through the unclipped branch at this point
/// (ties go to the unclipped branch, so the identity point θ = θ_old has
/// the plain policy-gradient direction).
fn unclipped_active(rho: f64, advantage: f64, clip: f64) -> bool {
    if advantage >= 0.0 {
        rho <= 1.0 + clip
    } else {
        rho >= 1.0 - clip
    }
}

struct StateStats {
    loss: f64,
    kl_sum: f64,
    clipped: usize,
    states: usize,
}

/// Per-state surrogate loss: `−mean(objective) + β_KL·mean(KL)` where KL is
/// the exact full-vocabulary `KL(π_old ‖ π_θ)` at each state.
pub fn ppo_surrogate_loss(
    policy: &Policy,
    items: &[SurrogateItem],
    clip: f64,
    kl_coefficient: f64,
) -> Result<f64> {
    surrogate_loss_and_maybe_grad(policy, items, clip, kl_coefficient, None).map(|s| s.loss)
}

/// [`ppo_surrogate_loss`] plus its gradient accumulated into `grad`.
pub fn ppo_surrogate_loss_and_grad(
    policy: &Policy,
    items: &[SurrogateItem],
    clip: f64,
    kl_coefficient: f64,
    grad: &mut [f64],
) -> Result<f64> {
    surrogate_loss_and_maybe_grad(policy, items, clip, kl_coefficient, Some(grad)).map(|s| s.loss)
}

fn surrogate_loss_and_maybe_grad(
    policy: &Policy,
    items: &[SurrogateItem],
    clip: f64,
    kl_coefficient: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<StateStats> {
    if items.is_empty() {
        return Err(Error::EmptyInput("ppo surrogate items"));
    }
    let layout = policy.layout();
    let d = layout.cfg.d_model;
    let v = layout.cfg.vocab_size;
    let w = 1.0 / items.len() as f64;
    let mut stats = StateStats {
        loss: 0.0,
        kl_sum: 0.0,
        clipped: 0,
        states: items.len(),
    };
    let mut logits = vec![0.0; v];
    let mut logp = vec![0.0; v];
    for (i, item) in items.iter().enumerate() {
        let cache = model::run_forward(layout, &policy.params, &item.context)?;
        let pos = cache.len() - 1;
        model::logits_into(layout, &policy.params, &cache, pos, &mut logits);
        math::log_softmax(&logits, &mut logp);
        let probs: Vec<f64> = logp.iter().map(|&lp| lp.exp()).collect();
        let a = item.action as usize;
        let rho = probs[a] / item.old_dist[a];
        let objective = clipped_objective(rho, item.advantage, clip);
        let kl: f64 = item
            .old_dist
            .iter()
            .zip(&logp)
            .map(|(&po, &lp)| po * (po.ln() - lp))
            .sum();
        let contribution = w * (-objective + kl_coefficient * kl);
        if !contribution.is_finite() {
            return Err(Error::NonFinite {
                context: format!("ppo surrogate at state {i}"),
            });
        }
        stats.loss += contribution;
        stats.kl_sum += kl;
        if (rho - 1.0).abs() > clip {
            stats.clipped += 1;
        }
        if let Some(grad) = grad.as_deref_mut() {
            let active = unclipped_active(rho, item.advantage, clip);
            // d objective / d z_v = Â·ρ·(1{v=a} − p_v) on the unclipped
            // branch, 0 where the clip is binding; d KL / d z_v = p_v − p_old_v
            let mut d_logits: Vec<f64> = probs
                .iter()
                .zip(&item.old_dist)
                .map(|(&p, &po)| {
                    let d_obj = if active {
                        item.advantage * rho * (-p)
                    } else {
                        0.0
                    };
                    w * (-d_obj + kl_coefficient * (p - po))
                })
                .collect();
            if active {
                d_logits[a] -= w * item.advantage * rho;
            }
            math::outer_acc(
                &mut grad[layout.head()],
                &d_logits,
                cache.hidden_row(pos, d),
            );
            let mut d_hidden = vec![0.0; cache.len() * d];
            math::matvec_t_acc(
                &policy.params[layout.head()],
                &d_logits,
                d,
                &mut d_hidden[pos * d..(pos + 1) * d],
            );
            model::backward(layout, &policy.params, &cache, &d_hidden, grad);
        }
    }
    Ok(stats)
}

/// Trajectory-grouped surrogate step: mathematically the per-state loss and
/// gradient over every response position of `trajs`, but with one forward
/// and one backward pass per trajectory. `advantages` supplies one slice per
/// trajectory (the batch-normalized values).
fn surrogate_grad_on_trajectories(
    policy: &Policy,
    trajs: &[&Trajectory],
    advantages: &[&[f64]],
    clip: f64,
    kl_coefficient: f64,
    grad: &mut [f64],
) -> Result<StateStats> {
    let layout = policy.layout();
    let d = layout.cfg.d_model;
    let v = layout.cfg.vocab_size;
    let total: usize = trajs.iter().map(|t| t.response_len()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("ppo minibatch has no states"));
    }
    let w = 1.0 / total as f64;
    let mut stats = StateStats {
        loss: 0.0,
        kl_sum: 0.0,
        clipped: 0,
        states: total,
    };
    let mut logits = vec![0.0; v];
    let mut logp = vec![0.0; v];
    for (j, traj) in trajs.iter().enumerate() {
        let cache = model::run_forward(layout, &policy.params, &traj.tokens)?;
        let mut d_hidden = vec![0.0; cache.len() * d];
        for t in 0..traj.response_len() {
            let pos = traj.prompt_len + t - 1;
            model::logits_into(layout, &policy.params, &cache, pos, &mut logits);
            math::log_softmax(&logits, &mut logp);
            let probs: Vec<f64> = logp.iter().map(|&lp| lp.exp()).collect();
            let a = traj.tokens[traj.prompt_len + t] as usize;
            let old = &traj.old_dists[t];
            let adv = advantages[j][t];
            let rho = probs[a] / old[a];
            let objective = clipped_objective(rho, adv, clip);
            let kl: f64 = old
                .iter()
                .zip(&logp)
                .map(|(&po, &lp)| po * (po.ln() - lp))
                .sum();
            let contribution = w * (-objective + kl_coefficient * kl);
            if !contribution.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("ppo surrogate: trajectory {j}, response position {t}"),
                });
            }
            stats.loss += contribution;
            stats.kl_sum += kl;
            if (rho - 1.0).abs() > clip {
                stats.clipped += 1;
            }
            let active = unclipped_active(rho, adv, clip);
            let mut d_logits: Vec<f64> = probs
                .iter()
                .zip(old)
                .map(|(&p, &po)| {
                    let d_obj = if active { adv * rho * (-p) } else { 0.0 };
                    w * (-d_obj + kl_coefficient * (p - po))
                })
                .collect();
            if active {
                d_logits[a] -= w * adv * rho;
            }
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
    Ok(stats)
}

/// Mean squared error between critic predictions and GAE returns over every
/// response position, with its gradient.
pub fn critic_loss_and_grad(
    critic: &Critic,
    trajs: &[&Trajectory],
    grad: &mut [f64],
) -> Result<f64> {
    let layout = &critic.layout;
    let d = layout.cfg.d_model;
    let total: usize = trajs.iter().map(|t| t.response_len()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("critic minibatch has no states"));
    }
    let w = 1.0 / total as f64;
    let mut loss = 0.0;
    for traj in trajs {
        let cache = model::run_forward(layout, &critic.params, &traj.tokens)?;
        let mut d_hidden = vec![0.0; cache.len() * d];
        let head = layout.head();
        for t in 0..traj.response_len() {
            let pos = traj.prompt_len + t - 1;
            let value = model::scalar_score(layout, &critic.params, &cache, pos);
            let err = value - traj.returns[t];
            loss += w * err * err;
            let d_score = 2.0 * w * err;
            math::axpy(
                &mut grad[head.start..head.start + d],
                d_score,
                cache.hidden_row(pos, d),
            );
            grad[head.start + d] += d_score;
            math::axpy(
                &mut d_hidden[pos * d..(pos + 1) * d],
                d_score,
                &critic.params[head.start..head.start + d],
            );
        }
        model::backward(layout, &critic.params, &cache, &d_hidden, grad);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "critic value loss".into(),
        });
    }
    Ok(loss)
}

/// One first-order critic step on the value MSE; returns the pre-update loss.
pub fn critic_update(
    critic: &mut Critic,
    opt: &mut AdamState,
    trajs: &[&Trajectory],
    lr: f64,
) -> Result<f64> {
    let mut grad = vec![0.0; critic.params.len()];
    let loss = critic_loss_and_grad(critic, trajs, &mut grad)?;
    opt.step(&mut critic.params, &grad, lr);
    Ok(loss)
}

/// One iteration row of the PPO metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoMetricsRow {
    pub iteration: usize,
    pub mean_terminal_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub mean_disparity_eval: f64,
}

/// Metrics log for a PPO run, plus the pre-training disparity baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoReport {
    pub advantages_normalized: bool,
    /// Mean answer-span disparity of greedy decodes before any update.
    pub baseline_disparity: f64,
    pub rows: Vec<PpoMetricsRow>,
}

impl PpoReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iteration,mean_terminal_reward,mean_kl,clip_fraction,value_loss,mean_disparity_eval\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration,
                r.mean_terminal_reward,
                r.mean_kl,
                r.clip_fraction,
                r.value_loss,
                r.mean_disparity_eval
            ));
        }
        out
    }
}

/// Mean answer-span disparity of greedy decodes over the first
/// `cfg.disparity_eval_prompts` prompts; responses without an extractable
/// answer span contribute 0.
fn mean_greedy_disparity(
    policy: &Policy,
    vocab: &Vocabulary,
    prompts: &[TokenSeq],
    cfg: &PPOConfig,
) -> Result<f64> {
    let n = cfg.disparity_eval_prompts.min(prompts.len());
    if n == 0 {
        return Ok(0.0);
    }
    let scores = par::par_map(&prompts[..n], |_, prompt| -> Result<f64> {
        let response = policy.greedy_decode(prompt, cfg.max_new_tokens)?;
        match identify_answer_span(vocab, &response, ANSWER_PHRASE) {
            Some(span) => disparity(policy, prompt, &response, span.start, span.end),
            None => Ok(0.0),
        }
    });
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / n as f64)
}

/// Run PPO: `iterations × (rollout → GAE → epochs of minibatch policy +
/// critic steps)`. The critic is initialized from the reward model and
/// trains as a separate parameter set; the reward model itself stays fixed.
/// Aborts with a divergence error when the mean per-token KL exceeds
/// 10×β_KL for three consecutive iterations (β_KL > 0 only).
pub fn ppo_train(
    policy: &mut Policy,
    vocab: &Vocabulary,
    rm: &RewardModel,
    prompts: &[TokenSeq],
    cfg: &PPOConfig,
) -> Result<PpoReport> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::EmptyInput("ppo prompts"));
    }
    let mut critic = Critic::from_reward_model(rm)?;
    let mut policy_opt = AdamState::new(policy.params.len());
    let mut critic_opt = AdamState::new(critic.params.len());
    let baseline_disparity = mean_greedy_disparity(policy, vocab, prompts, cfg)?;
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut kl_streak = 0usize;

    for iteration in 0..cfg.iterations {
        let mut trajs = rollout(policy, &critic, rm, vocab, prompts, cfg, iteration as u64)?;
        for traj in &mut trajs {
            fill_gae(traj, cfg.gamma, cfg.lambda)?;
        }
        let mean_terminal_reward =
            trajs.iter().map(Trajectory::terminal_reward).sum::<f64>() / trajs.len() as f64;

        // batch-level advantage normalization (kept separate so the raw
        // GAE values stay on the trajectories)
        let advantages: Vec<Vec<f64>> = if cfg.normalize_advantages {
            let all: Vec<f64> = trajs
                .iter()
                .flat_map(|t| t.advantages.iter().copied())
                .collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / all.len() as f64;
            let denom = var.sqrt() + 1e-8;
            trajs
                .iter()
                .map(|t| t.advantages.iter().map(|a| (a - mean) / denom).collect())
                .collect()
        } else {
            trajs.iter().map(|t| t.advantages.clone()).collect()
        };

        let mut kl_sum = 0.0;
        let mut clipped = 0usize;
        let mut states = 0usize;
        let mut value_loss_sum = 0.0;
        let mut value_states = 0usize;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..trajs.len()).collect();
            order.shuffle(&mut rng_from(
                cfg.seed,
                "ppo.epoch",
                &[iteration as u64, epoch as u64],
            ));
            for chunk in order.chunks(cfg.minibatch_size) {
                let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();
                let batch_adv: Vec<&[f64]> =
                    chunk.iter().map(|&i| advantages[i].as_slice()).collect();
                let mut grad = vec![0.0; policy.params.len()];
                let stats = surrogate_grad_on_trajectories(
                    policy,
                    &batch,
                    &batch_adv,
                    cfg.clip,
                    cfg.kl_coefficient,
                    &mut grad,
                )?;
                policy_opt.step(&mut policy.params, &grad, cfg.lr);
                kl_sum += stats.kl_sum;
                clipped += stats.clipped;
                states += stats.states;
                let v_loss = critic_update(&mut critic, &mut critic_opt, &batch, cfg.lr)?;
                value_loss_sum += v_loss * stats.states as f64;
                value_states += stats.states;
            }
        }

        let mean_kl = kl_sum / states as f64;
        let row = PpoMetricsRow {
            iteration,
            mean_terminal_reward,
            mean_kl,
            clip_fraction: clipped as f64 / states as f64,
            value_loss: value_loss_sum / value_states as f64,
            mean_disparity_eval: mean_greedy_disparity(policy, vocab, prompts, cfg)?,
        };
        rows.push(row);

        if cfg.kl_coefficient > 0.0 && mean_kl > 10.0 * cfg.kl_coefficient {
            kl_streak += 1;
            if kl_streak >= 3 {
                return Err(Error::Divergence { iteration, mean_kl });
            }
        } else {
            kl_streak = 0;
        }
    }
    Ok(PpoReport {
        advantages_normalized: cfg.normalize_advantages,
        baseline_disparity,
        rows,
    })
}
