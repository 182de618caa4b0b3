//! Policy optimization: PPO with generalised advantage estimation, a clipped
//! surrogate with an exact KL penalty, and a reward-model-initialized critic;
//! plus DPO as the direct alternative.

pub mod dpo;
pub mod gae;
pub mod ppo;

pub use dpo::{dpo_train, DPOConfig, DpoReport};
pub use gae::gae;
pub use ppo::{ppo_train, PPOConfig, PpoReport, Trajectory};
