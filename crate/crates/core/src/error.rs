//! Error type shared by every module in the crate.
//!
//! The CLI maps these onto process exit codes, so the variants distinguish
//! configuration mistakes, missing/invalid data, and numerical aborts.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A sequence does not fit into the model context window.
    #[error("sequence length {len} exceeds maximum context {max}")]
    Length { len: usize, max: usize },

    /// A character that is not part of the fixed vocabulary.
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),

    /// `prompt_len` does not split the sequence into prompt and response.
    #[error("prompt length {prompt_len} invalid for sequence of length {seq_len}")]
    PromptRange { prompt_len: usize, seq_len: usize },

    /// An operation that requires a non-empty input received an empty one.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A loss or gradient stopped being finite; training must abort.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// PPO divergence guard: the policy drifted too far from its snapshot.
    #[error("policy divergence at iteration {iteration}: mean KL {mean_kl:.6} exceeded guard threshold for 3 consecutive iterations")]
    Divergence { iteration: usize, mean_kl: f64 },

    /// Reward scores requested before a scale was fitted.
    #[error("reward scale has not been fitted; train the reward model first")]
    UnfittedScale,

    /// Calibration batch had no spread, so no scale can map it onto [-1, 1].
    #[error("degenerate reward scale: lo {lo} and hi {hi} too close to fit")]
    DegenerateScale { lo: f64, hi: f64 },

    /// `select_max_confidence` over hypotheses none of which were scored.
    #[error("no hypothesis carries an answer span; nothing to select")]
    NoScoredHypothesis,

    /// Gold-pair construction failed for the listed tasks.
    #[error("insufficient pair material for task ids {task_ids:?}")]
    InsufficientPairMaterial { task_ids: Vec<u64> },

    /// A serialized line could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint file is structurally invalid or from an unknown version.
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that indicate a numerical abort (non-finite values or
    /// optimizer divergence) rather than bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Divergence { .. })
    }
}
