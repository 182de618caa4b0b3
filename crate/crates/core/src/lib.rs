//! Self-contained reinforcement-learning-from-self-feedback pipeline:
//! procedural tasks, a from-scratch char-level transformer policy,
//! confidence-scored chain-of-thought decoding, synthetic preferences,
//! a Bradley–Terry reward model, PPO/DPO optimization, and evaluation.
//!
//! Everything is deterministic given the seeds threaded through each stage;
//! no step requires a network connection, a GPU, or external model weights.

pub mod checkpoint;
pub mod corpus;
pub mod cot_decode;
pub mod error;
pub mod eval;
pub mod math;
pub mod par;
pub mod policy;
pub mod preference;
pub mod reward_model;
pub mod rl;
pub mod rng;
pub mod vocab;

pub use error::{Error, Result};
pub use policy::model::ModelConfig;
pub use policy::Policy;
pub use vocab::{TokenSeq, Vocabulary};
