//! Synthetic preference pairs from confidence-ranked decoding branches.
//!
//! For each prompt, the scored hypotheses (those with an answer span) are
//! ranked by disparity confidence; pairs of (higher, lower) hypotheses become
//! (chosen, rejected) training records for the reward model. No human labels
//! are involved anywhere: the supervision signal is the model's own decoding
//! confidence.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::cot_decode::{cot_decode, CotConfig, Hypothesis};
use crate::error::Result;
use crate::policy::Policy;
use crate::vocab::Vocabulary;

/// How pairs are drawn from a ranked hypothesis list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum PairStrategy {
    /// At most one pair per prompt: highest vs. lowest confidence.
    BestWorst,
    /// Every ranked pair whose confidence gap reaches `min_gap`.
    AllPairs { min_gap: f64 },
}

impl Default for PairStrategy {
    fn default() -> Self {
        PairStrategy::AllPairs { min_gap: 0.05 }
    }
}

/// Branch indices and confidences behind a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub k_chosen: usize,
    pub k_rejected: usize,
    pub c_chosen: f64,
    pub c_rejected: f64,
}

/// One preference record; the JSONL schema is exactly these fields in this
/// order, with hypothesis texts stored without special tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    /// Confidence gap `c_chosen − c_rejected`; always > 0.
    pub gap: f64,
    pub meta: PairMeta,
}

/// Scored hypotheses sorted by confidence descending, ties toward the lower
/// branch index; hypotheses without an answer span are dropped.
pub fn rank_hypotheses(hypotheses: &[Hypothesis]) -> Vec<&Hypothesis> {
    let mut ranked: Vec<&Hypothesis> = hypotheses
        .iter()
        .filter(|h| h.confidence.is_some())
        .collect();
    ranked.sort_by(|a, b| {
        let ca = a.confidence.expect("filtered");
        let cb = b.confidence.expect("filtered");
        cb.partial_cmp(&ca)
            .expect("confidences are finite")
            .then(a.branch_index.cmp(&b.branch_index))
    });
    ranked
}

/// Build the preference pairs for one prompt. Pairs whose two hypotheses
/// announce the same answer text are skipped (they would teach the reward
/// model to split identical conclusions), as are pairs with no confidence
/// gap. Output is sorted by `(k_chosen, k_rejected)`.
pub fn build_pairs(
    prompt: &str,
    hypotheses: &[Hypothesis],
    strategy: PairStrategy,
) -> Vec<PreferencePair> {
    let ranked = rank_hypotheses(hypotheses);
    let mut out = Vec::new();
    let mut push = |better: &Hypothesis, worse: &Hypothesis| {
        let (ca, cb) = (better.confidence.unwrap(), worse.confidence.unwrap());
        if better.answer() == worse.answer() {
            return;
        }
        out.push(PreferencePair {
            prompt: prompt.to_string(),
            chosen: better.text.clone(),
            rejected: worse.text.clone(),
            gap: ca - cb,
            meta: PairMeta {
                k_chosen: better.branch_index,
                k_rejected: worse.branch_index,
                c_chosen: ca,
                c_rejected: cb,
            },
        });
    };
    match strategy {
        PairStrategy::BestWorst => {
            if ranked.len() >= 2 {
                let (best, worst) = (ranked[0], ranked[ranked.len() - 1]);
                if best.confidence.unwrap() - worst.confidence.unwrap() > 0.0 {
                    push(best, worst);
                }
            }
        }
        PairStrategy::AllPairs { min_gap } => {
            for i in 0..ranked.len() {
                for j in i + 1..ranked.len() {
                    let gap = ranked[i].confidence.unwrap() - ranked[j].confidence.unwrap();
                    if gap >= min_gap && gap > 0.0 {
                        push(ranked[i], ranked[j]);
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| {
        (a.meta.k_chosen, a.meta.k_rejected).cmp(&(b.meta.k_chosen, b.meta.k_rejected))
    });
    out
}

/// Decode every task and assemble its preference pairs. Tasks are processed
/// in input order; within a task, pairs are sorted by
/// `(k_chosen, k_rejected)`; exact duplicate records are dropped.
pub fn build_preference_dataset(
    policy: &Policy,
    vocab: &Vocabulary,
    tasks: &[Task],
    cot_cfg: &CotConfig,
    strategy: PairStrategy,
) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for task in tasks {
        let prompt = vocab.encode_prompt(&task.prompt)?;
        let hyps = cot_decode(policy, vocab, &prompt, cot_cfg)?;
        out.extend(build_pairs(&task.prompt, &hyps, strategy));
    }
    Ok(dedup_pairs(out))
}

/// Drop exact duplicates by (prompt, chosen, rejected), keeping first
/// occurrences in order.
pub fn dedup_pairs(pairs: Vec<PreferencePair>) -> Vec<PreferencePair> {
    let mut seen: BTreeSet<(String, String, String)> = BTreeSet::new();
    pairs
        .into_iter()
        .filter(|p| seen.insert((p.prompt.clone(), p.chosen.clone(), p.rejected.clone())))
        .collect()
}

/// Keep at most `max_per_prompt` pairs per prompt, preferring the largest
/// confidence gaps (ties toward lower branch indices), then restore the
/// `(k_chosen, k_rejected)` order within each prompt block.
pub fn cap_pairs_per_prompt(
    pairs: Vec<PreferencePair>,
    max_per_prompt: usize,
) -> Vec<PreferencePair> {
    let mut out: Vec<PreferencePair> = Vec::with_capacity(pairs.len());
    let mut block: Vec<PreferencePair> = Vec::new();
    let flush = |block: &mut Vec<PreferencePair>, out: &mut Vec<PreferencePair>| {
        if block.len() > max_per_prompt {
            block.sort_by(|a, b| {
                b.gap.partial_cmp(&a.gap).expect("gaps are finite").then(
                    (a.meta.k_chosen, a.meta.k_rejected).cmp(&(b.meta.k_chosen, b.meta.k_rejected)),
                )
            });
            block.truncate(max_per_prompt);
            block.sort_by(|a, b| {
                (a.meta.k_chosen, a.meta.k_rejected).cmp(&(b.meta.k_chosen, b.meta.k_rejected))
            });
        }
        out.append(block);
    };
    for pair in pairs {
        if block.last().is_some_and(|p| p.prompt != pair.prompt) {
            flush(&mut block, &mut out);
        }
        block.push(pair);
    }
    flush(&mut block, &mut out);
    out
}
