//! Generalised advantage estimation.
//!
//! `Â_t = Σ_l (γλ)^l δ_{t+l}` with `δ_t = r_t + γV(s_{t+1}) − V(s_t)`,
//! computed by the standard reverse recursion `Â_t = δ_t + γλ·Â_{t+1}`.

use crate::error::{Error, Result};

/// Advantages and returns for one trajectory. `rewards[t]` and `values[t]`
/// are indexed by response position; `bootstrap_value` is `V(s_T)` after the
/// final action (0 for terminal episodes). Returns `(advantages, returns)`
/// with `returns[t] = Â_t + V(s_t)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::Config(format!(
            "gae needs equal-length rewards ({}) and values ({})",
            rewards.len(),
            values.len()
        )));
    }
    if rewards.is_empty() {
        return Err(Error::EmptyInput("gae rewards"));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "gae needs γ, λ ∈ [0,1], got γ={gamma}, λ={lambda}"
        )));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap_value
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        advantages[t] = next_adv;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}
