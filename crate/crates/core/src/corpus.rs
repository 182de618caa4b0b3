//! Procedural task corpus: arithmetic and multiple-choice generators,
//! supervised targets in two styles, and JSONL (de)serialization.
//!
//! Every generator is a pure function of `(seed, id, …)`, so a corpus is
//! reproducible from its parameters alone and individual tasks can be
//! regenerated without materializing the whole set.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Maximum operand value (inclusive) drawn by the arithmetic generator.
pub const MAX_OPERAND: i64 = 99;
/// Option letters in display order; at most five choices per task.
pub const OPTION_LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];
/// The fixed conclusion phrase every supervised target ends with.
pub const ANSWER_PHRASE: &str = "So the answer is";

/// Binary operator in a flat arithmetic expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        }
    }

    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }
}

/// Flat left-to-right expression `t0 op1 t1 op2 t2 …` with `*` binding
/// tighter than `+`/`-`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expr {
    pub terms: Vec<i64>,
    pub ops: Vec<Op>,
}

impl Expr {
    /// Evaluate with standard precedence: all `*` left-to-right, then
    /// `+`/`-` left-to-right.
    pub fn value(&self) -> i64 {
        let (terms, ops) = self.mul_reduced();
        let mut v = terms[0];
        for (op, t) in ops.iter().zip(terms[1..].iter()) {
            v = op.apply(v, *t);
        }
        v
    }

    /// One reduction line per applied operator, in evaluation order, each
    /// formatted as `a <op> b = v`.
    pub fn steps(&self) -> Vec<String> {
        let mut lines = Vec::new();
        let mut terms = self.terms.clone();
        let mut ops = self.ops.clone();
        let mut i = 0;
        while i < ops.len() {
            if ops[i] == Op::Mul {
                let v = ops[i].apply(terms[i], terms[i + 1]);
                lines.push(format!(
                    "{} {} {} = {}",
                    terms[i],
                    ops[i].symbol(),
                    terms[i + 1],
                    v
                ));
                terms[i] = v;
                terms.remove(i + 1);
                ops.remove(i);
            } else {
                i += 1;
            }
        }
        while !ops.is_empty() {
            let v = ops[0].apply(terms[0], terms[1]);
            lines.push(format!(
                "{} {} {} = {}",
                terms[0],
                ops[0].symbol(),
                terms[1],
                v
            ));
            terms[0] = v;
            terms.remove(1);
            ops.remove(0);
        }
        lines
    }

    fn mul_reduced(&self) -> (Vec<i64>, Vec<Op>) {
        let mut terms = self.terms.clone();
        let mut ops = self.ops.clone();
        let mut i = 0;
        while i < ops.len() {
            if ops[i] == Op::Mul {
                terms[i] *= terms[i + 1];
                terms.remove(i + 1);
                ops.remove(i);
            } else {
                i += 1;
            }
        }
        (terms, ops)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.terms[0])?;
        for (op, t) in self.ops.iter().zip(self.terms[1..].iter()) {
            write!(f, " {} {}", op.symbol(), t)?;
        }
        Ok(())
    }
}

/// Task family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Arithmetic,
    MultipleChoice,
}

/// Supervised target style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Direct,
    ReasoningTrace,
}

/// Kind-specific payload kept alongside the rendered prompt so targets and
/// perturbed (wrong-answer) variants can be produced without re-parsing text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskDetail {
    Arithmetic {
        difficulty: u8,
        expr: Expr,
    },
    MultipleChoice {
        expr: Expr,
        options: Vec<i64>,
        answer_index: usize,
    },
}

/// One generated question with its gold answer text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub prompt: String,
    pub gold: String,
    pub detail: TaskDetail,
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self.detail {
            TaskDetail::Arithmetic { .. } => TaskKind::Arithmetic,
            TaskDetail::MultipleChoice { .. } => TaskKind::MultipleChoice,
        }
    }
}

/// One supervised example; the JSONL schema is exactly these six fields in
/// this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub id: u64,
    pub kind: TaskKind,
    pub prompt: String,
    pub target: String,
    pub gold: String,
    pub style: Style,
}

/// Generate one arithmetic task. `difficulty` must be 1..=3 and sets the
/// operand count to `difficulty + 1`; difficulty 1 draws operators from
/// `{+, -}`, higher difficulties also allow `*`. Operands are uniform on
/// `[0, MAX_OPERAND]`.
pub fn generate_arithmetic(seed: u64, id: u64, difficulty: u8) -> Result<Task> {
    if !(1..=3).contains(&difficulty) {
        return Err(Error::Config(format!(
            "difficulty must be 1..=3, got {difficulty}"
        )));
    }
    let mut rng = rng_from(seed, "corpus.arithmetic", &[id, difficulty as u64]);
    let n_terms = difficulty as usize + 1;
    let mut terms = Vec::with_capacity(n_terms);
    for _ in 0..n_terms {
        terms.push(rng.gen_range(0..=MAX_OPERAND));
    }
    let mut ops = Vec::with_capacity(n_terms - 1);
    for _ in 0..n_terms - 1 {
        let op = if difficulty == 1 {
            [Op::Add, Op::Sub][rng.gen_range(0..2)]
        } else {
            [Op::Add, Op::Sub, Op::Mul][rng.gen_range(0..3)]
        };
        ops.push(op);
    }
    let expr = Expr { terms, ops };
    let prompt = format!("Q: {expr}\nA:");
    let gold = expr.value().to_string();
    Ok(Task {
        id,
        prompt,
        gold,
        detail: TaskDetail::Arithmetic { difficulty, expr },
    })
}

/// Generate a multiple-choice task with the default four options.
pub fn generate_multiple_choice(seed: u64, id: u64) -> Result<Task> {
    generate_multiple_choice_with(seed, id, 4)
}

/// Generate a multiple-choice task with `n_options` in 3..=5. The question
/// embeds a two-operand expression; distractors are distinct nonzero offsets
/// of the true value and the correct option's position is drawn uniformly.
pub fn generate_multiple_choice_with(seed: u64, id: u64, n_options: usize) -> Result<Task> {
    if !(3..=5).contains(&n_options) {
        return Err(Error::Config(format!(
            "n_options must be 3..=5, got {n_options}"
        )));
    }
    let mut rng = rng_from(seed, "corpus.multiple_choice", &[id, n_options as u64]);
    let a = rng.gen_range(0..=MAX_OPERAND);
    let op = [Op::Add, Op::Sub][rng.gen_range(0..2)];
    let b = rng.gen_range(0..=MAX_OPERAND);
    let expr = Expr {
        terms: vec![a, b],
        ops: vec![op],
    };
    let value = expr.value();

    let mut distractors: Vec<i64> = Vec::with_capacity(n_options - 1);
    while distractors.len() < n_options - 1 {
        let delta = rng.gen_range(-9..=9i64);
        let candidate = value + delta;
        if delta != 0 && !distractors.contains(&candidate) {
            distractors.push(candidate);
        }
    }
    let answer_index = rng.gen_range(0..n_options);
    let mut options = Vec::with_capacity(n_options);
    let mut d = distractors.into_iter();
    for i in 0..n_options {
        if i == answer_index {
            options.push(value);
        } else {
            options.push(d.next().expect("enough distractors drawn"));
        }
    }

    let mut prompt = format!("Q: {expr}\n");
    for (i, v) in options.iter().enumerate() {
        prompt.push_str(&format!("{}. {}\n", OPTION_LETTERS[i], v));
    }
    prompt.push_str("Answer:");
    let gold = OPTION_LETTERS[answer_index].to_string();
    Ok(Task {
        id,
        prompt,
        gold,
        detail: TaskDetail::MultipleChoice {
            expr,
            options,
            answer_index,
        },
    })
}

/// Render the supervised target for `task` concluding with the gold answer.
pub fn sft_target(task: &Task, style: Style) -> String {
    render_target(task, style, &task.gold)
}

/// Render a target whose conclusion claims `answer` instead of the gold
/// answer (reasoning steps, when present, stay faithful to the question).
/// Used to build labeled wrong-answer variants for reward evaluation.
pub fn render_target(task: &Task, style: Style, answer: &str) -> String {
    match (style, &task.detail) {
        (Style::Direct, _) => format!(" {ANSWER_PHRASE} {answer}."),
        (Style::ReasoningTrace, TaskDetail::Arithmetic { expr, .. }) => {
            let mut out = String::new();
            for line in expr.steps() {
                out.push('\n');
                out.push_str(&line);
            }
            out.push_str(&format!("\n{ANSWER_PHRASE} {answer}."));
            out
        }
        (Style::ReasoningTrace, TaskDetail::MultipleChoice { expr, .. }) => {
            format!(
                "\n{} = {}\nThat is {answer}\n{ANSWER_PHRASE} {answer}.",
                expr,
                expr.value()
            )
        }
    }
}

/// A wrong answer for `task`, drawn deterministically from `(seed, task.id)`:
/// a nonzero numeric offset for arithmetic, a different option letter for
/// multiple choice.
pub fn wrong_answer(task: &Task, seed: u64) -> String {
    let mut rng = rng_from(seed, "corpus.wrong_answer", &[task.id]);
    match &task.detail {
        TaskDetail::Arithmetic { expr, .. } => {
            let mut delta = 0i64;
            while delta == 0 {
                delta = rng.gen_range(-9..=9);
            }
            (expr.value() + delta).to_string()
        }
        TaskDetail::MultipleChoice {
            options,
            answer_index,
            ..
        } => {
            let mut idx = *answer_index;
            while idx == *answer_index {
                idx = rng.gen_range(0..options.len());
            }
            OPTION_LETTERS[idx].to_string()
        }
    }
}

/// Knobs for corpus and task-set construction beyond the pinned arguments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusOptions {
    /// Fraction of tasks that are multiple choice (rounded to a count).
    pub multiple_choice_fraction: f64,
    /// Difficulty levels cycled across the arithmetic tasks.
    pub difficulties: Vec<u8>,
    /// Options per multiple-choice task (3..=5).
    pub n_options: usize,
    /// Fraction of reasoning-trace targets that get a single stray character
    /// prefixed before the leading newline. Branched decoding forces
    /// improbable first tokens; a policy trained on a few noisy prefixes
    /// learns to restart the trace cleanly instead of derailing, so branch
    /// confidence stays coupled to answer correctness.
    #[serde(default)]
    pub noise_prefix_fraction: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            multiple_choice_fraction: 0.25,
            difficulties: vec![1, 2, 3],
            n_options: 4,
            noise_prefix_fraction: 0.0,
        }
    }
}

impl CorpusOptions {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.multiple_choice_fraction) {
            return Err(Error::Config(format!(
                "multiple_choice_fraction must be in [0, 1], got {}",
                self.multiple_choice_fraction
            )));
        }
        if self.difficulties.is_empty() {
            return Err(Error::Config("difficulties must be non-empty".into()));
        }
        if self.difficulties.iter().any(|d| !(1..=3).contains(d)) {
            return Err(Error::Config("every difficulty must be 1..=3".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_prefix_fraction) {
            return Err(Error::Config(format!(
                "noise_prefix_fraction must be in [0, 1], got {}",
                self.noise_prefix_fraction
            )));
        }
        if !(3..=5).contains(&self.n_options) {
            return Err(Error::Config(format!(
                "n_options must be 3..=5, got {}",
                self.n_options
            )));
        }
        Ok(())
    }
}

/// Generate `n` tasks with ids `0..n` under the default mix.
pub fn build_task_set(seed: u64, n: usize) -> Result<Vec<Task>> {
    build_task_set_with(seed, n, &CorpusOptions::default())
}

/// Generate `n` tasks with ids `0..n`: the first `round(frac·n)` ids are
/// multiple choice, the rest arithmetic with difficulties cycled in order.
pub fn build_task_set_with(seed: u64, n: usize, opts: &CorpusOptions) -> Result<Vec<Task>> {
    opts.validate()?;
    let n_mc = (opts.multiple_choice_fraction * n as f64).round() as usize;
    let mut tasks = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let task = if (id as usize) < n_mc {
            generate_multiple_choice_with(seed, id, opts.n_options)?
        } else {
            let d = opts.difficulties[(id as usize - n_mc) % opts.difficulties.len()];
            generate_arithmetic(seed, id, d)?
        };
        tasks.push(task);
    }
    Ok(tasks)
}

/// Build a supervised corpus of `n` examples with exactly
/// `ceil(reasoning_ratio · n)` reasoning-trace targets, order shuffled by a
/// seeded permutation.
pub fn build_sft_corpus(seed: u64, n: usize, reasoning_ratio: f64) -> Result<Vec<SftExample>> {
    build_sft_corpus_with(seed, n, reasoning_ratio, &CorpusOptions::default())
}

/// [`build_sft_corpus`] with an explicit task mix.
pub fn build_sft_corpus_with(
    seed: u64,
    n: usize,
    reasoning_ratio: f64,
    opts: &CorpusOptions,
) -> Result<Vec<SftExample>> {
    if !(0.0..=1.0).contains(&reasoning_ratio) {
        return Err(Error::Config(format!(
            "reasoning_ratio must be in [0, 1], got {reasoning_ratio}"
        )));
    }
    let tasks = build_task_set_with(seed, n, opts)?;
    let n_reason = (reasoning_ratio * n as f64).ceil() as usize;

    let mut rng = rng_from(seed, "corpus.build", &[n as u64]);
    // Which ids get a reasoning trace is itself a seeded draw, so style is
    // uncorrelated with kind and difficulty.
    let mut style_order: Vec<usize> = (0..n).collect();
    style_order.shuffle(&mut rng);
    let mut styles = vec![Style::Direct; n];
    for &i in style_order.iter().take(n_reason) {
        styles[i] = Style::ReasoningTrace;
    }

    let mut examples: Vec<SftExample> = tasks
        .iter()
        .zip(styles.iter())
        .map(|(task, &style)| SftExample {
            id: task.id,
            kind: task.kind(),
            prompt: task.prompt.clone(),
            target: sft_target(task, style),
            gold: task.gold.clone(),
            style,
        })
        .collect();
    examples.shuffle(&mut rng);
    if opts.noise_prefix_fraction > 0.0 {
        // Separate stream so turning the knob off reproduces the unnoised
        // corpus byte for byte.
        let mut noise_rng = rng_from(seed, "corpus.noise_prefix", &[n as u64]);
        for ex in examples
            .iter_mut()
            .filter(|e| e.style == Style::ReasoningTrace)
        {
            if noise_rng.gen_bool(opts.noise_prefix_fraction) {
                let c = NOISE_PREFIX_CHARS[noise_rng.gen_range(0..NOISE_PREFIX_CHARS.len())];
                ex.target.insert(0, c);
            }
        }
    }
    Ok(examples)
}

/// Stray characters used for noisy trace prefixes: the digits, operators, and
/// phrase letters that dominate the low-probability tail of the first
/// response token, which is exactly where branched decoding lands.
const NOISE_PREFIX_CHARS: [char; 25] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', 'S', 'o', 't', 'h', 'e', 'a', 'n', 's', 'w',
    'r', 'i', '+', '-', '=', '.',
];

/// Write records as one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read one JSON object per line; errors carry the 1-based line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;

    /// Independent evaluator: re-parse a rendered expression string and
    /// evaluate it with a different algorithm (precedence climbing over
    /// tokens) than `Expr::value`.
    fn oracle_eval(text: &str) -> i64 {
        let toks: Vec<&str> = text.split(' ').collect();
        // Pass 1: fold multiplication into a list of signed addends.
        let mut addends: Vec<i64> = Vec::new();
        let mut pending_sign = 1i64;
        let mut current: i64 = toks[0].parse().unwrap();
        let mut i = 1;
        while i < toks.len() {
            let op = toks[i];
            let rhs: i64 = toks[i + 1].parse().unwrap();
            match op {
                "*" => current *= rhs,
                "+" => {
                    addends.push(pending_sign * current);
                    pending_sign = 1;
                    current = rhs;
                }
                "-" => {
                    addends.push(pending_sign * current);
                    pending_sign = -1;
                    current = rhs;
                }
                other => panic!("unexpected token {other:?}"),
            }
            i += 2;
        }
        addends.push(pending_sign * current);
        addends.iter().sum()
    }

    fn expr_text(task: &Task) -> String {
        // First prompt line is "Q: <expr>".
        task.prompt
            .lines()
            .next()
            .unwrap()
            .strip_prefix("Q: ")
            .unwrap()
            .to_string()
    }

    #[test]
    fn arithmetic_gold_matches_independent_evaluator() {
        for difficulty in 1..=3u8 {
            for id in 0..200u64 {
                let t = generate_arithmetic(7, id, difficulty).unwrap();
                let expected = oracle_eval(&expr_text(&t));
                assert_eq!(t.gold, expected.to_string(), "prompt {:?}", t.prompt);
            }
        }
    }

    #[test]
    fn arithmetic_shape_and_ranges() {
        for difficulty in 1..=3u8 {
            for id in 0..100u64 {
                let t = generate_arithmetic(11, id, difficulty).unwrap();
                let TaskDetail::Arithmetic { expr, .. } = &t.detail else {
                    panic!()
                };
                assert_eq!(expr.terms.len(), difficulty as usize + 1);
                assert!(expr.terms.iter().all(|&x| (0..=MAX_OPERAND).contains(&x)));
                if difficulty == 1 {
                    assert!(expr.ops.iter().all(|&o| o != Op::Mul));
                }
                assert!(t.prompt.ends_with("\nA:"));
            }
        }
        assert!(generate_arithmetic(1, 0, 0).is_err());
        assert!(generate_arithmetic(1, 0, 4).is_err());
    }

    #[test]
    fn arithmetic_is_deterministic_and_id_sensitive() {
        let a = generate_arithmetic(42, 3, 2).unwrap();
        let b = generate_arithmetic(42, 3, 2).unwrap();
        assert_eq!(a, b);
        let c = generate_arithmetic(42, 4, 2).unwrap();
        assert_ne!(a.prompt, c.prompt);
        let d = generate_arithmetic(43, 3, 2).unwrap();
        assert_ne!(a.prompt, d.prompt);
    }

    #[test]
    fn multiple_choice_options_are_valid() {
        for n_options in 3..=5usize {
            for id in 0..100u64 {
                let t = generate_multiple_choice_with(5, id, n_options).unwrap();
                let TaskDetail::MultipleChoice {
                    expr,
                    options,
                    answer_index,
                } = &t.detail
                else {
                    panic!()
                };
                assert_eq!(options.len(), n_options);
                let mut sorted = options.clone();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted.len(), n_options, "options must be distinct");
                let value = oracle_eval(&expr_text(&t));
                assert_eq!(expr.value(), value);
                assert_eq!(options[*answer_index], value);
                assert_eq!(t.gold, OPTION_LETTERS[*answer_index].to_string());
                // exactly one option equals the true value
                assert_eq!(options.iter().filter(|&&v| v == value).count(), 1);
                // option lines rendered in letter order
                for (i, v) in options.iter().enumerate() {
                    assert!(t
                        .prompt
                        .contains(&format!("{}. {}\n", OPTION_LETTERS[i], v)));
                }
                assert!(t.prompt.ends_with("\nAnswer:"));
            }
        }
        assert!(generate_multiple_choice_with(1, 0, 2).is_err());
        assert!(generate_multiple_choice_with(1, 0, 6).is_err());
    }

    #[test]
    fn reduction_steps_trace_the_value() {
        let expr = Expr {
            terms: vec![2, 3, 4, 5],
            ops: vec![Op::Add, Op::Mul, Op::Sub],
        };
        // 2 + 3*4 - 5 = 9, multiplication first, then left-to-right.
        assert_eq!(expr.value(), 9);
        assert_eq!(
            expr.steps(),
            vec!["3 * 4 = 12", "2 + 12 = 14", "14 - 5 = 9"]
        );
        // every step line is internally consistent
        for line in expr.steps() {
            let (lhs, rhs) = line.split_once(" = ").unwrap();
            assert_eq!(oracle_eval(lhs).to_string(), rhs);
        }
        // final step lands on the value
        assert!(expr.steps().last().unwrap().ends_with("= 9"));
    }

    #[test]
    fn targets_conclude_with_the_answer_phrase_exactly_once() {
        let vocab = Vocabulary::new();
        for ex in build_sft_corpus(3, 64, 0.5).unwrap() {
            assert!(ex
                .target
                .ends_with(&format!("{ANSWER_PHRASE} {}.", ex.gold)));
            assert_eq!(ex.target.matches(ANSWER_PHRASE).count(), 1);
            assert_eq!(ex.prompt.matches(ANSWER_PHRASE).count(), 0);
            match ex.style {
                Style::Direct => assert!(ex.target.starts_with(' ')),
                Style::ReasoningTrace => assert!(ex.target.starts_with('\n')),
            }
            // whole prompt ⊙ target is encodable
            vocab.encode(&ex.prompt).unwrap();
            vocab.encode(&ex.target).unwrap();
        }
    }

    #[test]
    fn corpus_reasoning_count_is_exact_ceil() {
        for (n, ratio, want) in [
            (10, 0.5, 5usize),
            (10, 0.55, 6),
            (7, 0.0, 0),
            (7, 1.0, 7),
            (3, 0.34, 2),
        ] {
            let corpus = build_sft_corpus(9, n, ratio).unwrap();
            let got = corpus
                .iter()
                .filter(|e| e.style == Style::ReasoningTrace)
                .count();
            assert_eq!(got, want, "n={n} ratio={ratio}");
        }
        assert!(build_sft_corpus(9, 4, -0.1).is_err());
        assert!(build_sft_corpus(9, 4, 1.5).is_err());
    }

    #[test]
    fn noise_prefix_marks_only_traces_and_keeps_targets_well_formed() {
        let opts = CorpusOptions {
            multiple_choice_fraction: 0.0,
            difficulties: vec![1],
            noise_prefix_fraction: 1.0,
            ..CorpusOptions::default()
        };
        let corpus = build_sft_corpus_with(5, 40, 0.5, &opts).unwrap();
        for ex in &corpus {
            match ex.style {
                Style::ReasoningTrace => {
                    let first = ex.target.chars().next().unwrap();
                    assert!(
                        NOISE_PREFIX_CHARS.contains(&first),
                        "target {:?}",
                        ex.target
                    );
                    assert_eq!(ex.target.chars().nth(1), Some('\n'));
                }
                Style::Direct => assert!(ex.target.starts_with(' ')),
            }
            assert_eq!(ex.target.matches(ANSWER_PHRASE).count(), 1);
            assert!(ex
                .target
                .ends_with(&format!("{ANSWER_PHRASE} {}.", ex.gold)));
        }
        // The knob only rewrites targets: everything else matches the
        // unnoised corpus, and fraction zero reproduces it exactly.
        let plain = build_sft_corpus_with(
            5,
            40,
            0.5,
            &CorpusOptions {
                difficulties: vec![1],
                multiple_choice_fraction: 0.0,
                ..CorpusOptions::default()
            },
        )
        .unwrap();
        let zero = build_sft_corpus_with(
            5,
            40,
            0.5,
            &CorpusOptions {
                multiple_choice_fraction: 0.0,
                difficulties: vec![1],
                noise_prefix_fraction: 0.0,
                ..CorpusOptions::default()
            },
        )
        .unwrap();
        assert_eq!(plain, zero);
        for (noised, plain) in corpus.iter().zip(&plain) {
            assert_eq!(noised.id, plain.id);
            assert_eq!(noised.style, plain.style);
            assert_eq!(noised.prompt, plain.prompt);
            if noised.style == Style::Direct {
                assert_eq!(noised.target, plain.target);
            } else {
                assert_eq!(
                    &noised.target[noised.target.char_indices().nth(1).unwrap().0..],
                    plain.target
                );
            }
        }
        assert!(build_sft_corpus_with(
            5,
            4,
            0.5,
            &CorpusOptions {
                noise_prefix_fraction: 1.1,
                ..CorpusOptions::default()
            }
        )
        .is_err());
    }

    #[test]
    fn corpus_is_seed_deterministic_and_shuffled() {
        let a = build_sft_corpus(21, 50, 0.4).unwrap();
        let b = build_sft_corpus(21, 50, 0.4).unwrap();
        assert_eq!(a, b);
        let c = build_sft_corpus(22, 50, 0.4).unwrap();
        assert_ne!(
            a.iter().map(|e| e.id).collect::<Vec<_>>(),
            c.iter().map(|e| e.id).collect::<Vec<_>>()
        );
        // ids are a permutation of 0..n
        let mut ids: Vec<u64> = a.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        // order is actually shuffled, not identity
        assert_ne!(
            a.iter().map(|e| e.id).collect::<Vec<_>>(),
            (0..50).collect::<Vec<_>>()
        );
    }

    #[test]
    fn task_set_respects_mix_options() {
        let opts = CorpusOptions {
            multiple_choice_fraction: 0.0,
            difficulties: vec![1],
            ..Default::default()
        };
        let tasks = build_task_set_with(13, 40, &opts).unwrap();
        assert!(tasks.iter().all(|t| t.kind() == TaskKind::Arithmetic));
        for t in &tasks {
            let TaskDetail::Arithmetic { difficulty, .. } = t.detail else {
                panic!()
            };
            assert_eq!(difficulty, 1);
        }

        let tasks = build_task_set_with(13, 40, &CorpusOptions::default()).unwrap();
        let n_mc = tasks
            .iter()
            .filter(|t| t.kind() == TaskKind::MultipleChoice)
            .count();
        assert_eq!(n_mc, 10); // round(0.25 * 40)
    }

    #[test]
    fn wrong_answer_differs_from_gold() {
        for id in 0..50u64 {
            let t = generate_arithmetic(17, id, 2).unwrap();
            let w = wrong_answer(&t, 99);
            assert_ne!(w, t.gold);
            w.parse::<i64>().unwrap();

            let m = generate_multiple_choice(17, id).unwrap();
            let w = wrong_answer(&m, 99);
            assert_ne!(w, m.gold);
            let TaskDetail::MultipleChoice { options, .. } = &m.detail else {
                panic!()
            };
            let letter = w.chars().next().unwrap();
            let idx = OPTION_LETTERS.iter().position(|&l| l == letter).unwrap();
            assert!(idx < options.len());
        }
    }

    #[test]
    fn sft_jsonl_schema_is_pinned() {
        let ex = SftExample {
            id: 7,
            kind: TaskKind::Arithmetic,
            prompt: "Q: 1 + 2\nA:".into(),
            target: " So the answer is 3.".into(),
            gold: "3".into(),
            style: Style::Direct,
        };
        let line = serde_json::to_string(&ex).unwrap();
        assert_eq!(
            line,
            "{\"id\":7,\"kind\":\"arithmetic\",\"prompt\":\"Q: 1 + 2\\nA:\",\
             \"target\":\" So the answer is 3.\",\"gold\":\"3\",\"style\":\"direct\"}"
        );
        let back: SftExample = serde_json::from_str(&line).unwrap();
        assert_eq!(back, ex);
    }

    #[test]
    fn jsonl_roundtrip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = build_sft_corpus(1, 20, 0.3).unwrap();
        write_jsonl(&path, &corpus).unwrap();
        let back: Vec<SftExample> = read_jsonl(&path).unwrap();
        assert_eq!(back, corpus);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"id\":1}\nnot json\n").unwrap();
        match read_jsonl::<SftExample>(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
