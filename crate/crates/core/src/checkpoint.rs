//! Versioned JSON checkpoints for policies, reward models, and critics.
//!
//! A checkpoint is a single self-describing JSON document: format version,
//! head kind, architecture, the vocabulary it was trained with, and the flat
//! parameter vector. Floats are serialized in shortest round-trip decimal
//! form, so save → load → save reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::model::{HeadKind, Layout, ModelConfig};
use crate::vocab::Vocabulary;

/// Current checkpoint format version; loads of any other version fail.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which head the stored parameters end with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Policy,
    Reward,
}

impl CheckpointKind {
    pub fn head_kind(self) -> HeadKind {
        match self {
            CheckpointKind::Policy => HeadKind::LanguageModel,
            CheckpointKind::Reward => HeadKind::Scalar,
        }
    }
}

/// Raw score interval a reward model maps onto [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub lo: f64,
    pub hi: f64,
}

/// On-disk model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: CheckpointKind,
    pub arch: ModelConfig,
    pub vocab: Vec<String>,
    pub step: u64,
    pub seed: u64,
    /// Present only on reward checkpoints once the score scale is fitted.
    pub scale: Option<ScaleRange>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    /// Structural validation: version, architecture, vocabulary, parameter
    /// count, and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.arch.validate()?;
        Vocabulary::from_tokens(self.vocab.clone())?;
        if self.arch.vocab_size != self.vocab.len() {
            return Err(Error::Checkpoint(format!(
                "arch vocab_size {} does not match stored vocabulary of {} tokens",
                self.arch.vocab_size,
                self.vocab.len()
            )));
        }
        let expected = Layout::new(self.arch, self.kind.head_kind()).total_len();
        if self.params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match architecture (expected {expected})",
                self.params.len()
            )));
        }
        if self.params.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter value".into()));
        }
        if let Some(s) = &self.scale {
            if !s.lo.is_finite() || !s.hi.is_finite() {
                return Err(Error::Checkpoint("non-finite scale bounds".into()));
            }
        }
        Ok(())
    }
}

/// Validate and write a checkpoint as compact JSON.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Read and validate a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let r = BufReader::new(File::open(path)?);
    let ckpt: Checkpoint =
        serde_json::from_reader(r).map_err(|e| Error::Checkpoint(e.to_string()))?;
    ckpt.validate()?;
    Ok(ckpt)
}
