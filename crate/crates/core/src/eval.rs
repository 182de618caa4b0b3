//! Answer accuracy, expected calibration error, and reward-model benchmark.
//!
//! A prediction's confidence is the aggregated top-token probability `p₁`
//! over its answer-span positions (the choice token alone for multiple
//! choice); responses with no extractable answer span count as incorrect
//! with confidence 0. ECE uses `B` equal-width bins over [0,1] with a
//! right-inclusive last bin.

use serde::{Deserialize, Serialize};

use crate::corpus::{Task, ANSWER_PHRASE};
use crate::cot_decode::{cot_decode, identify_answer_span, select_max_confidence, CotConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::policy::Policy;
use crate::reward_model::{pairwise_accuracy, RewardModel};
use crate::vocab::{TokenSeq, Vocabulary};

/// Decoding strategy under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalMode {
    Greedy,
    CoTDecode { k: usize },
}

/// How span top-token probabilities aggregate into one confidence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceAggregation {
    #[default]
    Mean,
    Product,
    Min,
}

impl ConfidenceAggregation {
    fn apply(self, probs: &[f64]) -> f64 {
        match self {
            ConfidenceAggregation::Mean => probs.iter().sum::<f64>() / probs.len() as f64,
            ConfidenceAggregation::Product => probs.iter().product(),
            ConfidenceAggregation::Min => probs.iter().fold(f64::INFINITY, |m, &p| m.min(p)),
        }
    }
}

/// Evaluation knobs; `bins` is the calibration bin count B.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub bins: usize,
    pub aggregation: ConfidenceAggregation,
    pub max_new_tokens: usize,
    pub probe: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Greedy,
            bins: 10,
            aggregation: ConfidenceAggregation::Mean,
            max_new_tokens: 64,
            probe: ANSWER_PHRASE.to_string(),
        }
    }
}

/// One task's graded prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task_id: u64,
    pub predicted: String,
    pub gold: String,
    pub confidence: f64,
    pub correct: bool,
}

/// Canonical answer comparison: integers compare by value (so "011" matches
/// "11"), everything else (choice letters) by exact text.
pub fn answers_match(predicted: &str, gold: &str) -> bool {
    match (predicted.parse::<i64>(), gold.parse::<i64>()) {
        (Ok(a), Ok(b)) => a == b,
        _ => predicted == gold,
    }
}

/// Top-token probability `p₁` at each response position in
/// `span_start..span_end`, recomputed from the temperature-1 distributions.
fn span_top_probs(
    policy: &Policy,
    prompt: &[u32],
    response: &[u32],
    span_start: usize,
    span_end: usize,
) -> Result<Vec<f64>> {
    if span_start >= span_end || span_end > response.len() {
        return Err(Error::Config(format!(
            "answer span {span_start}..{span_end} out of range for response of length {}",
            response.len()
        )));
    }
    let mut run = policy.start();
    run.push_all(prompt)?;
    let mut probs = Vec::with_capacity(span_end - span_start);
    for (t, &token) in response.iter().enumerate() {
        if t >= span_end {
            break;
        }
        if t >= span_start {
            let dist = run.next_distribution();
            probs.push(dist.iter().fold(f64::NEG_INFINITY, |m, &p| m.max(p)));
        }
        run.push(token)?;
    }
    Ok(probs)
}

fn graded(task: &Task, predicted: Option<(String, f64)>) -> PredictionRecord {
    match predicted {
        Some((answer, confidence)) => PredictionRecord {
            task_id: task.id,
            correct: answers_match(&answer, &task.gold),
            predicted: answer,
            gold: task.gold.clone(),
            confidence,
        },
        None => PredictionRecord {
            task_id: task.id,
            predicted: String::new(),
            gold: task.gold.clone(),
            confidence: 0.0,
            correct: false,
        },
    }
}

/// Greedy-decode `task`, locate the answer span, and grade it. Span-absent
/// responses come back as (confidence 0, incorrect).
pub fn predict(
    policy: &Policy,
    vocab: &Vocabulary,
    task: &Task,
    cfg: &EvalConfig,
) -> Result<PredictionRecord> {
    let prompt = vocab.encode_prompt(&task.prompt)?;
    let response = policy.greedy_decode(&prompt, cfg.max_new_tokens)?;
    let Some(span) = identify_answer_span(vocab, &response, &cfg.probe) else {
        return Ok(graded(task, None));
    };
    let probs = span_top_probs(policy, &prompt, &response, span.start, span.end)?;
    let confidence = cfg.aggregation.apply(&probs);
    Ok(graded(task, Some((span.text, confidence))))
}

fn predict_cot(
    policy: &Policy,
    vocab: &Vocabulary,
    task: &Task,
    k: usize,
    cfg: &EvalConfig,
) -> Result<PredictionRecord> {
    let prompt = vocab.encode_prompt(&task.prompt)?;
    let cot_cfg = CotConfig {
        k,
        max_new_tokens: cfg.max_new_tokens,
        probe: cfg.probe.clone(),
    };
    let hypotheses = cot_decode(policy, vocab, &prompt, &cot_cfg)?;
    let Ok(best) = select_max_confidence(&hypotheses) else {
        return Ok(graded(task, None));
    };
    let span = best.span.as_ref().expect("scored hypothesis has a span");
    let confidence = cfg.aggregation.apply(&best.top_probs[span.start..span.end]);
    Ok(graded(task, Some((span.text.clone(), confidence))))
}

/// One reliability-table row: records whose confidence falls in [lo, hi)
/// (the last bin includes 1.0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub gap: f64,
}

/// Binned calibration summary; `ece` weights each bin's |accuracy − mean
/// confidence| by its share of the records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub accuracy: f64,
    pub n: usize,
}

impl CalibrationReport {
    /// Reliability table as CSV.
    pub fn to_reliability_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,mean_conf,accuracy,gap\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.lo, b.hi, b.count, b.mean_confidence, b.accuracy, b.gap
            ));
        }
        out
    }
}

/// Expected calibration error over `bins` equal-width bins. Bin membership
/// uses `floor(c·B)` clamped to the last bin, so the final bin is
/// right-inclusive. Per-bin sums run in a canonical record order, making the
/// result independent of input permutation, bit for bit.
pub fn compute_ece(records: &[PredictionRecord], bins: usize) -> Result<CalibrationReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("calibration records"));
    }
    if bins == 0 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    let mut by_bin: Vec<Vec<(f64, bool)>> = vec![Vec::new(); bins];
    for r in records {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::Config(format!(
                "confidence {} of task {} outside [0,1]",
                r.confidence, r.task_id
            )));
        }
        let idx = ((r.confidence * bins as f64).floor() as usize).min(bins - 1);
        by_bin[idx].push((r.confidence, r.correct));
    }
    let n = records.len();
    let width = 1.0 / bins as f64;
    let mut ece = 0.0;
    let mut correct_total = 0usize;
    let mut rows = Vec::with_capacity(bins);
    for (i, member) in by_bin.iter_mut().enumerate() {
        member.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let count = member.len();
        let (mut mean_confidence, mut accuracy, mut gap) = (0.0, 0.0, 0.0);
        if count > 0 {
            mean_confidence = member.iter().map(|m| m.0).sum::<f64>() / count as f64;
            let correct = member.iter().filter(|m| m.1).count();
            correct_total += correct;
            accuracy = correct as f64 / count as f64;
            gap = (accuracy - mean_confidence).abs();
            ece += count as f64 / n as f64 * gap;
        }
        rows.push(CalibrationBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count,
            mean_confidence,
            accuracy,
            gap,
        });
    }
    Ok(CalibrationReport {
        bins: rows,
        ece,
        accuracy: correct_total as f64 / n as f64,
        n,
    })
}

/// Headline numbers of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub ece: f64,
    pub n: usize,
    pub mode: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "B")]
    pub b: usize,
    pub aggregation: ConfidenceAggregation,
}

/// Evaluation result: summary, reliability table, and per-task records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub summary: EvalSummary,
    pub calibration: CalibrationReport,
    pub records: Vec<PredictionRecord>,
}

/// Grade every task under `cfg.mode` and assemble the calibration report.
/// Tasks evaluate independently (and in parallel); the report is a
/// deterministic reduction in task order.
pub fn evaluate_policy(
    policy: &Policy,
    vocab: &Vocabulary,
    tasks: &[Task],
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("evaluation tasks"));
    }
    let records: Vec<PredictionRecord> = par::par_map(tasks, |_, task| match cfg.mode {
        EvalMode::Greedy => predict(policy, vocab, task, cfg),
        EvalMode::CoTDecode { k } => predict_cot(policy, vocab, task, k, cfg),
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let calibration = compute_ece(&records, cfg.bins)?;
    let (mode, k) = match cfg.mode {
        EvalMode::Greedy => ("greedy".to_string(), None),
        EvalMode::CoTDecode { k } => ("cot_decode".to_string(), Some(k)),
    };
    let summary = EvalSummary {
        accuracy: calibration.accuracy,
        ece: calibration.ece,
        n: calibration.n,
        mode,
        k,
        b: cfg.bins,
        aggregation: cfg.aggregation,
    };
    Ok(EvalOutcome {
        summary,
        calibration,
        records,
    })
}

/// Gold-labeled (correct, incorrect) sequence pairs for one task, drawn from
/// the policy's own decoded branches: every hypothesis whose answer matches
/// the gold answer is paired against every hypothesis whose answer does not.
/// Empty when the branches lack a correct or an incorrect member.
pub fn hypothesis_pairs(
    policy: &Policy,
    vocab: &Vocabulary,
    task: &Task,
    cot: &CotConfig,
) -> Result<Vec<(TokenSeq, TokenSeq)>> {
    let prompt = vocab.encode_prompt(&task.prompt)?;
    let hypotheses = cot_decode(policy, vocab, &prompt, cot)?;
    let (correct, incorrect): (Vec<_>, Vec<_>) = hypotheses
        .iter()
        .partition(|h| answers_match(h.answer().unwrap_or(""), &task.gold));
    // Sequences are rebuilt through encode_response so they end with <eos>
    // exactly like the training-side pairs from tokenize_pair.
    let mut pairs = Vec::with_capacity(correct.len() * incorrect.len());
    for good in &correct {
        let chosen = prompt.concat(&vocab.encode_response(&good.text)?);
        for bad in &incorrect {
            pairs.push((
                chosen.clone(),
                prompt.concat(&vocab.encode_response(&bad.text)?),
            ));
        }
    }
    Ok(pairs)
}

/// Gold-labeled pairwise reward accuracy over the policy's own sampled
/// hypotheses: decode each task's branches, label them by answer
/// correctness, and ask the reward model to rank every correct hypothesis
/// above every incorrect one. Tasks whose branches are all correct or all
/// incorrect provide no pair material and are reported as an error.
pub fn reward_bench(
    rm: &RewardModel,
    vocab: &Vocabulary,
    tasks: &[Task],
    policy: &Policy,
    cot: &CotConfig,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("reward bench tasks"));
    }
    let per_task = par::par_map(tasks, |_, task| hypothesis_pairs(policy, vocab, task, cot));
    let mut pairs = Vec::new();
    let mut insufficient = Vec::new();
    for (task, result) in tasks.iter().zip(per_task) {
        let task_pairs = result?;
        if task_pairs.is_empty() {
            insufficient.push(task.id);
        } else {
            pairs.extend(task_pairs);
        }
    }
    if !insufficient.is_empty() {
        return Err(Error::InsufficientPairMaterial {
            task_ids: insufficient,
        });
    }
    pairwise_accuracy(rm, &pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::ScaleRange;
    use crate::corpus::{build_sft_corpus, build_task_set, generate_arithmetic};
    use crate::policy::model::ModelConfig;
    use crate::policy::{tokenize_example, train_sft, SftConfig};
    use crate::rng::rng_from;
    use rand::seq::SliceRandom;

    fn record(conf: f64, correct: bool) -> PredictionRecord {
        PredictionRecord {
            task_id: 0,
            predicted: String::new(),
            gold: String::new(),
            confidence: conf,
            correct,
        }
    }

    #[test]
    fn canonical_answer_comparison() {
        assert!(answers_match("11", "11"));
        assert!(answers_match("011", "11"));
        assert!(answers_match("-0", "0"));
        assert!(!answers_match("12", "13"));
        assert!(answers_match("A", "A"));
        assert!(!answers_match("A", "B"));
        assert!(!answers_match("", "11"));
    }

    #[test]
    fn worked_two_bin_example_scores_015() {
        let records = vec![
            record(0.9, true),
            record(0.8, false),
            record(0.6, true),
            record(0.3, false),
        ];
        let report = compute_ece(&records, 2).unwrap();
        // oracle: brute-force the two bins directly
        let upper = [(0.9, true), (0.8, false), (0.6, true)];
        let conf: f64 = upper.iter().map(|u| u.0).sum::<f64>() / 3.0;
        let acc = 2.0 / 3.0;
        let oracle = 3.0 / 4.0 * (acc - conf).abs() + 1.0 / 4.0 * (0.0f64 - 0.3).abs();
        assert!((report.ece - oracle).abs() < 1e-15);
        assert!((report.ece - 0.15).abs() < 1e-12);
        assert_eq!(report.bins.len(), 2);
        assert_eq!(report.bins[0].count, 1);
        assert_eq!(report.bins[1].count, 3);
        assert!((report.accuracy - 0.5).abs() < 1e-15);
    }

    #[test]
    fn calibration_extremes() {
        let perfect: Vec<_> = (0..5).map(|_| record(1.0, true)).collect();
        assert_eq!(compute_ece(&perfect, 10).unwrap().ece, 0.0);
        let wrong: Vec<_> = (0..5).map(|_| record(1.0, false)).collect();
        assert_eq!(compute_ece(&wrong, 10).unwrap().ece, 1.0);
        // confidence 1.0 lands in the (right-inclusive) last bin
        let report = compute_ece(&perfect, 10).unwrap();
        assert_eq!(report.bins[9].count, 5);
    }

    #[test]
    fn ece_is_bitwise_permutation_invariant() {
        let mut rng = rng_from(3, "test.ece-shuffle", &[]);
        use rand::Rng;
        let mut records: Vec<PredictionRecord> = (0..40)
            .map(|_| record(rng.gen_range(0.0..=1.0), rng.gen_bool(0.5)))
            .collect();
        let baseline = compute_ece(&records, 10).unwrap().ece;
        for _ in 0..1000 {
            records.shuffle(&mut rng);
            let ece = compute_ece(&records, 10).unwrap().ece;
            assert_eq!(ece.to_bits(), baseline.to_bits());
        }
    }

    #[test]
    fn single_bin_ece_is_accuracy_confidence_gap() {
        let records = vec![record(0.2, true), record(0.7, false), record(0.9, true)];
        let report = compute_ece(&records, 1).unwrap();
        let conf: f64 = (0.2 + 0.7 + 0.9) / 3.0;
        let oracle: f64 = (2.0 / 3.0 - conf).abs();
        assert!((report.ece - oracle).abs() < 1e-15);
    }

    #[test]
    fn merged_record_sets_add_bin_counts() {
        let a: Vec<_> = (0..7)
            .map(|i| record(i as f64 / 10.0, i % 2 == 0))
            .collect();
        let b: Vec<_> = (0..9)
            .map(|i| record(i as f64 / 12.0, i % 3 == 0))
            .collect();
        let ra = compute_ece(&a, 5).unwrap();
        let rb = compute_ece(&b, 5).unwrap();
        let merged: Vec<_> = a.iter().chain(b.iter()).cloned().collect();
        let rm = compute_ece(&merged, 5).unwrap();
        for i in 0..5 {
            assert_eq!(rm.bins[i].count, ra.bins[i].count + rb.bins[i].count);
        }
        assert!((0.0..=1.0).contains(&rm.ece));
    }

    #[test]
    fn ece_rejects_empty_and_out_of_range_inputs() {
        assert!(compute_ece(&[], 10).is_err());
        assert!(compute_ece(&[record(0.5, true)], 0).is_err());
        assert!(compute_ece(&[record(1.5, true)], 10).is_err());
    }

    /// A small policy SFT-trained on direct-style answers, enough for
    /// greedy decodes to produce parseable spans.
    fn trained_policy_and_tasks() -> (Policy, Vec<Task>, Vocabulary) {
        let vocab = Vocabulary::new();
        let tasks = build_task_set(77, 8).unwrap();
        let corpus = build_sft_corpus(77, 8, 0.0).unwrap();
        let batch: Vec<_> = corpus
            .iter()
            .map(|ex| tokenize_example(&vocab, ex).unwrap())
            .collect();
        let mut policy = Policy::init(
            ModelConfig {
                vocab_size: vocab.size(),
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                context_len: 128,
            },
            1,
        )
        .unwrap();
        let cfg = SftConfig {
            lr: 3e-3,
            epochs: 30,
            batch_size: 8,
            seed: 5,
        };
        train_sft(&mut policy, &batch, &cfg).unwrap();
        (policy, tasks, vocab)
    }

    #[test]
    fn greedy_and_k1_cot_evaluations_agree() {
        let (policy, tasks, vocab) = trained_policy_and_tasks();
        let greedy = evaluate_policy(&policy, &vocab, &tasks, &EvalConfig::default()).unwrap();
        let cot_cfg = EvalConfig {
            mode: EvalMode::CoTDecode { k: 1 },
            ..EvalConfig::default()
        };
        let cot = evaluate_policy(&policy, &vocab, &tasks, &cot_cfg).unwrap();
        assert_eq!(greedy.records.len(), tasks.len());
        for (g, c) in greedy.records.iter().zip(&cot.records) {
            assert_eq!(g.predicted, c.predicted);
            assert_eq!(g.correct, c.correct);
            assert_eq!(g.confidence.to_bits(), c.confidence.to_bits());
        }
        // accuracy is the mean of the correct flags
        let mean = greedy.records.iter().filter(|r| r.correct).count() as f64
            / greedy.records.len() as f64;
        assert!((greedy.summary.accuracy - mean).abs() < 1e-15);
        for r in &greedy.records {
            assert!((0.0..=1.0).contains(&r.confidence));
        }
        assert_eq!(greedy.summary.mode, "greedy");
        assert_eq!(cot.summary.k, Some(1));
        let csv = greedy.calibration.to_reliability_csv();
        assert!(csv.starts_with("bin_lo,bin_hi,count,mean_conf,accuracy,gap\n"));
        assert_eq!(csv.lines().count(), 11);
    }

    #[test]
    fn unparseable_predictions_are_incorrect_with_zero_confidence() {
        // an untrained policy emits junk, so spans are absent
        let vocab = Vocabulary::new();
        let policy = Policy::init(
            ModelConfig {
                vocab_size: vocab.size(),
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                context_len: 64,
            },
            3,
        )
        .unwrap();
        let task = generate_arithmetic(9, 0, 1).unwrap();
        let record = predict(&policy, &vocab, &task, &EvalConfig::default()).unwrap();
        if record.predicted.is_empty() {
            assert_eq!(record.confidence, 0.0);
            assert!(!record.correct);
        }
    }

    #[test]
    fn constant_reward_model_benches_at_chance() {
        let (policy, tasks, vocab) = trained_policy_and_tasks();
        let mut rm = RewardModel::from_policy(&policy); // zero head → constant score
        rm.set_scale(ScaleRange { lo: -1.0, hi: 1.0 }).unwrap();
        let cot = CotConfig {
            k: 6,
            ..CotConfig::default()
        };
        // keep only tasks whose branches include both labels
        let benchable: Vec<Task> = tasks
            .iter()
            .filter(|t| {
                !hypothesis_pairs(&policy, &vocab, t, &cot)
                    .unwrap()
                    .is_empty()
            })
            .cloned()
            .collect();
        assert!(
            !benchable.is_empty(),
            "fixture policy produced no mixed-label branch sets"
        );
        let acc = reward_bench(&rm, &vocab, &benchable, &policy, &cot).unwrap();
        assert_eq!(acc, 0.5); // every comparison ties
    }

    #[test]
    fn tasks_without_both_labels_are_reported_as_insufficient() {
        let vocab = Vocabulary::new();
        // an untrained policy emits junk: no branch ever answers correctly
        let policy = Policy::init(
            ModelConfig {
                vocab_size: vocab.size(),
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                context_len: 128,
            },
            4,
        )
        .unwrap();
        let mut rm = RewardModel::from_policy(&policy);
        rm.set_scale(ScaleRange { lo: -1.0, hi: 1.0 }).unwrap();
        let task = generate_arithmetic(9, 41, 1).unwrap();
        let cot = CotConfig {
            k: 4,
            ..CotConfig::default()
        };
        assert!(hypothesis_pairs(&policy, &vocab, &task, &cot)
            .unwrap()
            .is_empty());
        match reward_bench(&rm, &vocab, &[task], &policy, &cot) {
            Err(Error::InsufficientPairMaterial { task_ids }) => assert_eq!(task_ids, vec![41]),
            other => panic!("expected InsufficientPairMaterial, got {other:?}"),
        }
    }
}
