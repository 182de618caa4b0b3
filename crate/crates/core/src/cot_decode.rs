//! Chain-of-thought decoding with disparity confidence.
//!
//! Instead of a single greedy pass, decoding branches over the top-K first
//! tokens and continues each branch greedily. Every generated position
//! records the margin between the two most likely tokens at temperature 1;
//! a hypothesis's confidence is the mean margin over its *answer span* —
//! the tokens that spell the final answer — located by probing the decoded
//! text for the fixed conclusion phrase.

use serde::{Deserialize, Serialize};

use crate::corpus::{ANSWER_PHRASE, OPTION_LETTERS};
use crate::error::{Error, Result};
use crate::math;
use crate::policy::Policy;
use crate::vocab::{TokenSeq, Vocabulary};

/// Decoding knobs; `k` is the branching factor over first tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CotConfig {
    pub k: usize,
    pub max_new_tokens: usize,
    pub probe: String,
}

impl Default for CotConfig {
    fn default() -> Self {
        CotConfig {
            k: 10,
            max_new_tokens: 64,
            probe: ANSWER_PHRASE.to_string(),
        }
    }
}

/// Token range (within the response) that spells the final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    /// First response-token index of the span.
    pub start: usize,
    /// One past the last response-token index.
    pub end: usize,
    /// The answer text the span spells.
    pub text: String,
}

/// One decoded branch with its per-position statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Rank of the branch's first token by first-token probability (0 = top).
    pub branch_index: usize,
    pub first_token: u32,
    pub first_token_prob: f64,
    /// Generated response tokens, including a trailing `<eos>` when emitted.
    pub tokens: TokenSeq,
    /// Decoded response text.
    pub text: String,
    /// `p₁ − p₂` of the generating distribution at each response position.
    pub margins: Vec<f64>,
    /// `p₁` (top-token probability) at each response position.
    pub top_probs: Vec<f64>,
    /// Located answer span, when the probe phrase and a parsable answer exist.
    pub span: Option<AnswerSpan>,
    /// Mean margin over the span; `None` when no span was found.
    pub confidence: Option<f64>,
}

impl Hypothesis {
    /// Answer text, when one was located.
    pub fn answer(&self) -> Option<&str> {
        self.span.as_ref().map(|s| s.text.as_str())
    }
}

/// A candidate first token with its probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchStart {
    pub token: u32,
    pub prob: f64,
}

/// The `k` most probable first tokens after `prompt`, sorted by probability
/// descending with ties broken toward the lower token id. `k` must be
/// between 1 and the vocabulary size.
pub fn branch_first_tokens(policy: &Policy, prompt: &[u32], k: usize) -> Result<Vec<BranchStart>> {
    let v = policy.cfg().vocab_size;
    if k == 0 || k > v {
        return Err(Error::Config(format!(
            "branch count k must be in 1..={v}, got {k}"
        )));
    }
    let dist = policy.next_token_distribution(prompt)?;
    Ok(rank_first_tokens(&dist, k))
}

fn rank_first_tokens(dist: &[f64], k: usize) -> Vec<BranchStart> {
    let mut order: Vec<u32> = (0..dist.len() as u32).collect();
    order.sort_by(|&a, &b| {
        dist[b as usize]
            .partial_cmp(&dist[a as usize])
            .expect("softmax probabilities are finite")
            .then(a.cmp(&b))
    });
    order[..k]
        .iter()
        .map(|&t| BranchStart {
            token: t,
            prob: dist[t as usize],
        })
        .collect()
}

/// Greedy continuation after forcing `first_token`, up to `max_new_tokens`
/// response tokens total (the forced token counts), stopping at `<eos>` or
/// the context limit.
pub fn continue_branch(
    policy: &Policy,
    prompt: &[u32],
    first_token: u32,
    max_new_tokens: usize,
) -> Result<TokenSeq> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("continue_branch prompt"));
    }
    if max_new_tokens == 0 {
        return Err(Error::Config("max_new_tokens must be ≥ 1".into()));
    }
    let mut run = policy.start();
    run.push_all(prompt)?;
    let dist = run.next_distribution();
    let (h, _) = decode_branch(run, first_token, &dist, max_new_tokens)?;
    Ok(h)
}

/// Shared greedy loop: force the first token, then argmax with low-id ties.
/// Returns the tokens plus per-position (margin, top-prob) pairs.
fn decode_branch(
    mut run: crate::policy::PolicyRun<'_>,
    first_token: u32,
    first_dist: &[f64],
    max_new_tokens: usize,
) -> Result<(TokenSeq, Vec<(f64, f64)>)> {
    let eos = Vocabulary::new().eos_id;
    let mut tokens = TokenSeq::default();
    let mut stats = Vec::new();

    let (p1, p2) = math::top2(first_dist);
    stats.push((p1 - p2, p1));
    run.push(first_token)?;
    tokens.push(first_token);

    while tokens.len() < max_new_tokens && first_token != eos {
        if run.remaining() == 0 {
            break;
        }
        let dist = run.next_distribution();
        let (p1, p2) = math::top2(&dist);
        stats.push((p1 - p2, p1));
        let tok = math::argmax_tie_lowest(&dist) as u32;
        run.push(tok)?;
        tokens.push(tok);
        if tok == eos {
            break;
        }
    }
    Ok((tokens, stats))
}

/// Parse the answer text announced after the *last* occurrence of `probe`
/// in `text`: an optionally signed digit run, or a single option letter.
pub fn extract_answer(text: &str, probe: &str) -> Option<String> {
    debug_assert!(text.is_ascii(), "vocabulary characters are ASCII");
    let at = text.rfind(probe)?;
    let rest = text[at + probe.len()..].trim_start_matches(' ');
    let bytes = rest.as_bytes();
    if bytes.is_empty() {
        return None;
    }
    let digits_from = if bytes[0] == b'-' { 1 } else { 0 };
    let digit_len = bytes[digits_from..]
        .iter()
        .take_while(|b| b.is_ascii_digit())
        .count();
    if digit_len > 0 {
        return Some(rest[..digits_from + digit_len].to_string());
    }
    let first = rest.chars().next()?;
    if OPTION_LETTERS.contains(&first) {
        return Some(first.to_string());
    }
    None
}

/// Locate the answer span in a decoded response: extract the announced
/// answer, then map the *last* exact occurrence of that text back onto
/// response-token indices. Returns `None` (not an error) when the probe or a
/// parsable answer is absent.
pub fn identify_answer_span(vocab: &Vocabulary, tokens: &[u32], probe: &str) -> Option<AnswerSpan> {
    let text = vocab.decode(tokens);
    let answer = extract_answer(&text, probe)?;
    let char_start = text.rfind(&answer)?;
    let char_end = char_start + answer.len();

    // map character range → token range; special tokens cover zero chars
    let mut start = None;
    let mut end = 0;
    let mut c = 0usize;
    for (j, &tok) in tokens.iter().enumerate() {
        let w = vocab.token_text(tok).len();
        if w > 0 && c >= char_start && c < char_end {
            if start.is_none() {
                start = Some(j);
            }
            end = j + 1;
        }
        c += w;
    }
    start.map(|start| AnswerSpan {
        start,
        end,
        text: answer,
    })
}

/// Mean top-two margin of the policy's temperature-1 distributions over the
/// response positions `span_start..span_end` of `response` given `prompt`.
pub fn disparity(
    policy: &Policy,
    prompt: &[u32],
    response: &[u32],
    span_start: usize,
    span_end: usize,
) -> Result<f64> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("disparity prompt"));
    }
    if span_start >= span_end || span_end > response.len() {
        return Err(Error::Config(format!(
            "span {span_start}..{span_end} invalid for response of length {}",
            response.len()
        )));
    }
    let mut run = policy.start();
    run.push_all(prompt)?;
    run.push_all(&response[..span_end])?;
    let prompt_len = prompt.len();
    let mut sum = 0.0;
    for j in span_start..span_end {
        let mut dist = run.logits_at(prompt_len + j - 1);
        math::softmax_inplace(&mut dist);
        let (p1, p2) = math::top2(&dist);
        sum += p1 - p2;
    }
    Ok(sum / (span_end - span_start) as f64)
}

/// Branch over the top-`k` first tokens and decode each greedily, scoring
/// answer spans by mean margin. Returns exactly `k` hypotheses ordered by
/// `branch_index`.
pub fn cot_decode(
    policy: &Policy,
    vocab: &Vocabulary,
    prompt: &[u32],
    cfg: &CotConfig,
) -> Result<Vec<Hypothesis>> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("cot_decode prompt"));
    }
    if cfg.max_new_tokens == 0 {
        return Err(Error::Config("max_new_tokens must be ≥ 1".into()));
    }
    let v = policy.cfg().vocab_size;
    if cfg.k == 0 || cfg.k > v {
        return Err(Error::Config(format!(
            "branch count k must be in 1..={v}, got {}",
            cfg.k
        )));
    }

    let mut base = policy.start();
    base.push_all(prompt)?;
    let first_dist = base.next_distribution();
    let starts = rank_first_tokens(&first_dist, cfg.k);

    let mut hypotheses = Vec::with_capacity(cfg.k);
    for (branch_index, start) in starts.iter().enumerate() {
        let (tokens, stats) =
            decode_branch(base.clone(), start.token, &first_dist, cfg.max_new_tokens)?;
        let text = vocab.decode(&tokens);
        let span = identify_answer_span(vocab, &tokens, &cfg.probe);
        let margins: Vec<f64> = stats.iter().map(|&(m, _)| m).collect();
        let top_probs: Vec<f64> = stats.iter().map(|&(_, p)| p).collect();
        let confidence = span.as_ref().map(|s| {
            let mut sum = 0.0;
            for j in s.start..s.end {
                sum += margins[j];
            }
            sum / (s.end - s.start) as f64
        });
        hypotheses.push(Hypothesis {
            branch_index,
            first_token: start.token,
            first_token_prob: start.prob,
            tokens,
            text,
            margins,
            top_probs,
            span,
            confidence,
        });
    }
    Ok(hypotheses)
}

/// The scored hypothesis with the highest confidence; ties resolve to the
/// lowest branch index. Errors when no hypothesis carries an answer span.
pub fn select_max_confidence(hypotheses: &[Hypothesis]) -> Result<&Hypothesis> {
    let mut best: Option<&Hypothesis> = None;
    for h in hypotheses {
        let Some(c) = h.confidence else { continue };
        match best {
            Some(b) if c <= b.confidence.expect("best is scored") => {}
            _ => best = Some(h),
        }
    }
    best.ok_or(Error::NoScoredHypothesis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::ModelConfig;

    fn tiny_policy(seed: u64) -> Policy {
        Policy::init(
            ModelConfig {
                vocab_size: Vocabulary::new().size(),
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                context_len: 96,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn extract_answer_handles_numbers_letters_and_absence() {
        let p = ANSWER_PHRASE;
        assert_eq!(extract_answer("x\nSo the answer is 34.", p).unwrap(), "34");
        assert_eq!(extract_answer("So the answer is -7.", p).unwrap(), "-7");
        assert_eq!(
            extract_answer("That is B\nSo the answer is B.", p).unwrap(),
            "B"
        );
        // trimming stops at the first non-digit
        assert_eq!(
            extract_answer("So the answer is 120 + 5.", p).unwrap(),
            "120"
        );
        // last probe occurrence wins
        assert_eq!(
            extract_answer("So the answer is 1.\nSo the answer is 2.", p).unwrap(),
            "2"
        );
        assert_eq!(extract_answer("no conclusion here", p), None);
        assert_eq!(extract_answer("So the answer is .", p), None);
        assert_eq!(extract_answer("So the answer is", p), None);
        // bare '-' with no digits is not an answer
        assert_eq!(extract_answer("So the answer is -.", p), None);
    }

    #[test]
    fn answer_span_points_at_the_last_occurrence() {
        let vocab = Vocabulary::new();
        let text = "\n57 - 23 = 34\nSo the answer is 34.";
        let tokens = vocab.encode_response(text).unwrap();
        let span = identify_answer_span(&vocab, &tokens, ANSWER_PHRASE).unwrap();
        assert_eq!(span.text, "34");
        assert_eq!(span.end - span.start, 2);
        // the span must cover the final "34", not the one in the work line
        assert_eq!(span.start, text.rfind("34").unwrap());
        assert_eq!(vocab.decode(&tokens[span.start..span.end]), "34");
        // trailing eos token is never part of a span
        assert!(span.end < tokens.len());
    }

    #[test]
    fn span_is_absent_not_an_error_for_unconcluded_text() {
        let vocab = Vocabulary::new();
        let tokens = vocab.encode_response("\n1 + 1 = 2\nnot there").unwrap();
        assert_eq!(identify_answer_span(&vocab, &tokens, ANSWER_PHRASE), None);
    }

    #[test]
    fn first_token_ranking_breaks_ties_toward_low_ids() {
        // zero parameters → identical logits → uniform distribution → the
        // ranking must be exactly 0, 1, 2, …
        let cfg = ModelConfig {
            vocab_size: Vocabulary::new().size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 32,
        };
        let policy = Policy::from_params(
            cfg,
            vec![
                0.0;
                {
                    use crate::policy::model::{HeadKind, Layout};
                    Layout::new(cfg, HeadKind::LanguageModel).total_len()
                }
            ],
        )
        .unwrap();
        let starts = branch_first_tokens(&policy, &[1, 5, 9], 6).unwrap();
        let ids: Vec<u32> = starts.iter().map(|s| s.token).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
        let p = 1.0 / cfg.vocab_size as f64;
        assert!(starts.iter().all(|s| (s.prob - p).abs() < 1e-12));
    }

    #[test]
    fn branch_count_bounds_are_enforced() {
        let policy = tiny_policy(1);
        let v = policy.cfg().vocab_size;
        assert!(branch_first_tokens(&policy, &[1, 2], 0).is_err());
        assert!(branch_first_tokens(&policy, &[1, 2], v + 1).is_err());
        assert_eq!(branch_first_tokens(&policy, &[1, 2], v).unwrap().len(), v);
    }

    #[test]
    fn cot_decode_returns_k_ordered_hypotheses_and_branch_zero_is_greedy() {
        let policy = tiny_policy(7);
        let vocab = Vocabulary::new();
        let prompt = vocab.encode_prompt("Q: 1 + 2\nA:").unwrap();
        let cfg = CotConfig {
            k: 5,
            max_new_tokens: 12,
            probe: ANSWER_PHRASE.into(),
        };
        let hyps = cot_decode(&policy, &vocab, &prompt, &cfg).unwrap();
        assert_eq!(hyps.len(), 5);
        for (i, h) in hyps.iter().enumerate() {
            assert_eq!(h.branch_index, i);
            assert_eq!(h.margins.len(), h.tokens.len());
            assert_eq!(h.top_probs.len(), h.tokens.len());
            assert!(h.tokens.len() <= 12);
            assert!(h.margins.iter().all(|&m| (0.0..=1.0).contains(&m)));
        }
        // first-token probabilities are sorted descending
        for w in hyps.windows(2) {
            assert!(w[0].first_token_prob >= w[1].first_token_prob);
        }
        // branch 0 follows the plain greedy path
        let greedy = policy.greedy_decode(&prompt, 12).unwrap();
        assert_eq!(hyps[0].tokens, greedy);
        // deterministic
        let again = cot_decode(&policy, &vocab, &prompt, &cfg).unwrap();
        assert_eq!(again[3].tokens, hyps[3].tokens);
        assert_eq!(again[3].margins, hyps[3].margins);
    }

    #[test]
    fn recorded_margins_agree_with_standalone_disparity() {
        let policy = tiny_policy(3);
        let vocab = Vocabulary::new();
        let prompt = vocab.encode_prompt("Q: 9 - 4\nA:").unwrap();
        let cfg = CotConfig {
            k: 3,
            max_new_tokens: 10,
            probe: ANSWER_PHRASE.into(),
        };
        let hyps = cot_decode(&policy, &vocab, &prompt, &cfg).unwrap();
        for h in &hyps {
            if h.tokens.len() < 4 {
                continue;
            }
            // arbitrary span: positions 1..4
            let c = disparity(&policy, &prompt, &h.tokens, 1, 4).unwrap();
            let mean = (h.margins[1] + h.margins[2] + h.margins[3]) / 3.0;
            assert!((c - mean).abs() < 1e-12, "{c} vs {mean}");
        }
        // invalid spans are rejected
        assert!(disparity(&policy, &prompt, &hyps[0].tokens, 2, 2).is_err());
        assert!(disparity(&policy, &prompt, &hyps[0].tokens, 0, 99).is_err());
    }

    #[test]
    fn select_max_confidence_prefers_high_c_then_low_branch() {
        fn h(branch: usize, confidence: Option<f64>) -> Hypothesis {
            Hypothesis {
                branch_index: branch,
                first_token: 0,
                first_token_prob: 0.0,
                tokens: TokenSeq::default(),
                text: String::new(),
                margins: vec![],
                top_probs: vec![],
                span: confidence.map(|_| AnswerSpan {
                    start: 0,
                    end: 1,
                    text: "0".into(),
                }),
                confidence,
            }
        }
        let hyps = vec![
            h(0, Some(0.4)),
            h(1, None),
            h(2, Some(0.9)),
            h(3, Some(0.9)),
        ];
        let best = select_max_confidence(&hyps).unwrap();
        assert_eq!(
            best.branch_index, 2,
            "tie on 0.9 must pick the lower branch"
        );

        let unscored = vec![h(0, None), h(1, None)];
        match select_max_confidence(&unscored) {
            Err(Error::NoScoredHypothesis) => {}
            other => panic!("expected NoScoredHypothesis, got {other:?}"),
        }
    }

    #[test]
    fn continue_branch_matches_cot_branch_tokens() {
        let policy = tiny_policy(5);
        let vocab = Vocabulary::new();
        let prompt = vocab.encode_prompt("Q: 3 + 3\nA:").unwrap();
        let cfg = CotConfig {
            k: 4,
            max_new_tokens: 8,
            probe: ANSWER_PHRASE.into(),
        };
        let hyps = cot_decode(&policy, &vocab, &prompt, &cfg).unwrap();
        for h in &hyps {
            let alone = continue_branch(&policy, &prompt, h.first_token, 8).unwrap();
            assert_eq!(alone, h.tokens, "branch {}", h.branch_index);
        }
    }
}
