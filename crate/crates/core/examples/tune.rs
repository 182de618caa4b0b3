//! Scratch harness for sizing the desk-scale experiment fixtures.
//! Not part of the shipped pipeline; run with
//! `cargo run -p rlsf-core --example tune`.

use std::collections::BTreeSet;
use std::time::Instant;

use rlsf_core::corpus::{
    build_sft_corpus_with, build_task_set_with, CorpusOptions, Task, ANSWER_PHRASE,
};
use rlsf_core::cot_decode::{disparity, identify_answer_span, CotConfig};
use rlsf_core::eval::{evaluate_policy, hypothesis_pairs, reward_bench, EvalConfig};
use rlsf_core::policy::{tokenize_example, train_sft, SftConfig, TrainSequence};
use rlsf_core::preference::{build_preference_dataset, PairStrategy};
use rlsf_core::reward_model::{train_reward_model, RewardConfig, RewardModel};
use rlsf_core::rl::{ppo_train, PPOConfig};
use rlsf_core::{ModelConfig, Policy, TokenSeq, Vocabulary};

fn heldout_tasks(
    seed: u64,
    n: usize,
    opts: &CorpusOptions,
    taken: &mut BTreeSet<String>,
) -> Vec<Task> {
    let buffer = build_task_set_with(seed, 3 * n, opts).unwrap();
    let mut out = Vec::with_capacity(n);
    for t in buffer {
        if out.len() == n {
            break;
        }
        if taken.insert(t.prompt.clone()) {
            out.push(t);
        }
    }
    assert_eq!(out.len(), n, "not enough distinct held-out prompts");
    out
}

fn mean_greedy_reward(
    policy: &Policy,
    rm: &RewardModel,
    prompts: &[TokenSeq],
    max_new: usize,
) -> f64 {
    let mut sum = 0.0;
    for p in prompts {
        let resp = policy.greedy_decode(p, max_new).unwrap();
        let full = p.concat(&resp);
        sum += rm.score(&full).unwrap();
    }
    sum / prompts.len() as f64
}

fn mean_span_disparity(policy: &Policy, vocab: &Vocabulary, tasks: &[Task], max_new: usize) -> f64 {
    let mut sum = 0.0;
    for t in tasks {
        let prompt = vocab.encode_prompt(&t.prompt).unwrap();
        let resp = policy.greedy_decode(&prompt, max_new).unwrap();
        if let Some(span) = identify_answer_span(vocab, &resp, ANSWER_PHRASE) {
            sum += disparity(policy, &prompt, &resp, span.start, span.end).unwrap();
        }
    }
    sum / tasks.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let d_model: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(24);
    let sft_lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let sft_epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let n_sft: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let ppo_iters: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);
    let n_rollout: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(500);
    println!("== d_model={d_model} sft_lr={sft_lr} sft_epochs={sft_epochs} n_sft={n_sft} ppo_iters={ppo_iters} n_rollout={n_rollout}");

    let n_rlsf = 500;
    let n_eval = 200;
    let ratio: f64 = std::env::var("RATIO")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.5);
    let noise: f64 = std::env::var("NOISE")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.0);
    println!("   ratio={ratio} noise={noise}");
    let opts = CorpusOptions {
        multiple_choice_fraction: 0.0,
        difficulties: vec![1],
        n_options: 4,
        noise_prefix_fraction: noise,
    };
    let vocab = Vocabulary::new();

    let sft_corpus = build_sft_corpus_with(11, n_sft, ratio, &opts).unwrap();
    let rlsf_tasks = build_task_set_with(12, n_rlsf, &opts).unwrap();
    let mut taken: BTreeSet<String> = sft_corpus.iter().map(|e| e.prompt.clone()).collect();
    taken.extend(rlsf_tasks.iter().map(|t| t.prompt.clone()));
    let heldout = heldout_tasks(13, n_eval, &opts, &mut taken);

    let data: Vec<TrainSequence> = sft_corpus
        .iter()
        .map(|ex| tokenize_example(&vocab, ex).unwrap())
        .collect();
    let mcfg = ModelConfig {
        vocab_size: vocab.size(),
        d_model,
        n_layers: 2,
        n_heads: 2,
        context_len: 96,
    };
    let cache = std::env::var("SFT_CACHE").ok();
    let mut policy = Policy::init(mcfg, 1).unwrap();
    if let Some(path) = cache.as_ref().filter(|p| std::path::Path::new(p).exists()) {
        policy = Policy::from_checkpoint(
            &rlsf_core::checkpoint::load_checkpoint(path.as_ref()).unwrap(),
        )
        .unwrap();
        println!("sft: loaded from {path}");
    } else {
        let t = Instant::now();
        let rep = train_sft(
            &mut policy,
            &data,
            &SftConfig {
                lr: sft_lr,
                epochs: sft_epochs,
                batch_size: 8,
                seed: 2,
            },
        )
        .unwrap();
        println!(
            "sft: {:.1?}  loss {:.3} -> {:.3}",
            t.elapsed(),
            rep.epoch_losses.first().unwrap(),
            rep.epoch_losses.last().unwrap()
        );
        if let Some(path) = cache.as_ref() {
            rlsf_core::checkpoint::save_checkpoint(path.as_ref(), &policy.to_checkpoint(0, 1))
                .unwrap();
        }
    }

    let t = Instant::now();
    let ecfg = EvalConfig::default();
    let out = evaluate_policy(&policy, &vocab, &heldout, &ecfg).unwrap();
    println!(
        "heldout greedy: {:.1?}  acc {:.3}  ece {:.3}",
        t.elapsed(),
        out.summary.accuracy,
        out.summary.ece
    );
    {
        let (mut tr, mut di, mut other) = (0usize, 0usize, 0usize);
        for task in &heldout {
            let prompt = vocab.encode_prompt(&task.prompt).unwrap();
            let resp = policy.greedy_decode(&prompt, 64).unwrap();
            match vocab.decode(&resp).chars().next() {
                Some('\n') => tr += 1,
                Some(' ') => di += 1,
                _ => other += 1,
            }
        }
        println!("greedy style mix: trace {tr}  direct {di}  other {other}");
    }

    let t = Instant::now();
    let cot = CotConfig::default();
    let min_gap: f64 = std::env::var("PAIR_GAP")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.05);
    let pairs = build_preference_dataset(
        &policy,
        &vocab,
        &rlsf_tasks,
        &cot,
        PairStrategy::AllPairs { min_gap },
    )
    .unwrap();
    println!(
        "decode+pairs: {:.1?}  pairs {} (min_gap {})",
        t.elapsed(),
        pairs.len(),
        min_gap
    );

    if std::env::var("INSPECT").is_ok() {
        use rlsf_core::cot_decode::cot_decode;
        for task in rlsf_tasks.iter().take(4) {
            println!("--- {}  (gold {})", task.prompt, task.gold);
            let prompt = vocab.encode_prompt(&task.prompt).unwrap();
            let hyps = cot_decode(&policy, &vocab, &prompt, &cot).unwrap();
            for h in &hyps {
                println!(
                    "  k={} conf={:?} ans={:?} text={:?}",
                    h.branch_index,
                    h.confidence.map(|c| (c * 1000.0).round() / 1000.0),
                    h.answer(),
                    h.text
                );
            }
        }
        // confidence-vs-correctness on the held-out decodes
        let mut top_conf_right = 0usize;
        let mut greedy_right = 0usize;
        for task in &rlsf_tasks {
            let prompt = vocab.encode_prompt(&task.prompt).unwrap();
            let hyps = cot_decode(&policy, &vocab, &prompt, &cot).unwrap();
            if let Some(h0) = hyps.iter().find(|h| h.branch_index == 0) {
                if h0.answer() == Some(task.gold.as_str()) {
                    greedy_right += 1;
                }
            }
            if let Ok(best) = rlsf_core::cot_decode::select_max_confidence(&hyps) {
                if best.answer() == Some(task.gold.as_str()) {
                    top_conf_right += 1;
                }
            }
        }
        println!(
            "rollout prompts: greedy correct {:.3}, top-confidence correct {:.3}",
            greedy_right as f64 / rlsf_tasks.len() as f64,
            top_conf_right as f64 / rlsf_tasks.len() as f64
        );
    }

    // how many pairs actually contrast a correct chosen with an incorrect
    // rejected (the signal the gold benchmark needs)
    let gold_of: std::collections::BTreeMap<&str, &str> = rlsf_tasks
        .iter()
        .map(|t| (t.prompt.as_str(), t.gold.as_str()))
        .collect();
    let phrase = |ans: &str| format!("{ANSWER_PHRASE} {ans}.");
    let mut clean = 0usize;
    let mut inverted = 0usize;
    for p in &pairs {
        let gold = gold_of[p.prompt.as_str()];
        let c_ok = p.chosen.contains(&phrase(gold));
        let r_ok = p.rejected.contains(&phrase(gold));
        if c_ok && !r_ok {
            clean += 1;
        }
        if !c_ok && r_ok {
            inverted += 1;
        }
    }
    println!(
        "pair quality: {:.3} clean, {:.3} inverted, {:.3} neutral",
        clean as f64 / pairs.len() as f64,
        inverted as f64 / pairs.len() as f64,
        (pairs.len() - clean - inverted) as f64 / pairs.len() as f64
    );

    // style/confidence/correctness census over all rollout-prompt branches
    {
        use rlsf_core::cot_decode::cot_decode;
        struct Agg {
            n: usize,
            conf: f64,
            right: usize,
        }
        let mut by_style: std::collections::BTreeMap<String, Agg> = Default::default();
        for task in &rlsf_tasks {
            let prompt = vocab.encode_prompt(&task.prompt).unwrap();
            let hyps = cot_decode(&policy, &vocab, &prompt, &cot).unwrap();
            for h in &hyps {
                let style = if h.text.contains('\n') {
                    "trace"
                } else {
                    "direct"
                };
                for key in [
                    style.to_string(),
                    format!("{style}/k{}", h.branch_index.min(2)),
                ] {
                    let e = by_style.entry(key).or_insert(Agg {
                        n: 0,
                        conf: 0.0,
                        right: 0,
                    });
                    e.n += 1;
                    e.conf += h.confidence.unwrap_or(0.0);
                    e.right += (h.answer() == Some(task.gold.as_str())) as usize;
                }
            }
        }
        for (style, a) in &by_style {
            println!(
                "branch census[{style}]: n {}  mean_conf {:.3}  acc {:.3}",
                a.n,
                a.conf / a.n as f64,
                a.right as f64 / a.n as f64
            );
        }
    }

    let t = Instant::now();
    let (rm, rrep) = train_reward_model(
        &policy,
        &vocab,
        &pairs,
        &RewardConfig {
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    println!(
        "rm: {:.1?}  train_acc {:.3}",
        t.elapsed(),
        rrep.train_accuracy
    );

    let t = Instant::now();
    let benchable: Vec<Task> = heldout
        .iter()
        .filter(|t| {
            !hypothesis_pairs(&policy, &vocab, t, &cot)
                .unwrap()
                .is_empty()
        })
        .cloned()
        .collect();
    let rb = reward_bench(&rm, &vocab, &benchable, &policy, &cot).unwrap();
    println!(
        "reward_bench (policy hypotheses, gold-labeled): {:.1?}  tasks {}/{}  acc {:.3}",
        t.elapsed(),
        benchable.len(),
        heldout.len(),
        rb
    );

    // Decompose bench accuracy by the class of the incorrect hypothesis, and
    // optionally dump wrong-trace texts to see the policy's failure anatomy.
    {
        use rlsf_core::cot_decode::cot_decode;
        use rlsf_core::eval::answers_match;
        struct Cls {
            n: usize,
            right: f64,
        }
        let mut by_class: std::collections::BTreeMap<&'static str, Cls> = Default::default();
        let mut dumped = 0usize;
        for task in &heldout {
            let prompt = vocab.encode_prompt(&task.prompt).unwrap();
            let hyps = cot_decode(&policy, &vocab, &prompt, &cot).unwrap();
            let (good, bad): (Vec<_>, Vec<_>) = hyps
                .iter()
                .partition(|h| answers_match(h.answer().unwrap_or(""), &task.gold));
            for b in &bad {
                let class = match (b.answer().is_some(), b.text.contains('\n')) {
                    (false, _) => "no-answer",
                    (true, true) => "trace-wrong",
                    (true, false) => "direct-wrong",
                };
                if std::env::var("INSPECT_WRONG").is_ok() && class == "trace-wrong" && dumped < 12 {
                    println!(
                        "  wrong trace (conf {:?}): prompt {:?} gold {} text {:?}",
                        b.confidence.map(|c| (c * 1000.0).round() / 1000.0),
                        task.prompt,
                        task.gold,
                        b.text
                    );
                    dumped += 1;
                }
                let bs = rm
                    .raw_score(&prompt.concat(&vocab.encode_response(&b.text).unwrap()))
                    .unwrap();
                for g in &good {
                    let gs = rm
                        .raw_score(&prompt.concat(&vocab.encode_response(&g.text).unwrap()))
                        .unwrap();
                    let e = by_class.entry(class).or_insert(Cls { n: 0, right: 0.0 });
                    e.n += 1;
                    e.right += if gs > bs {
                        1.0
                    } else if gs == bs {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        for (class, c) in &by_class {
            println!(
                "bench by incorrect class[{class}]: pairs {}  detect {:.3}",
                c.n,
                c.right / c.n as f64
            );
        }
    }

    // Upper bound: a reward model trained on oracle gold-vs-wrong pairs
    // tells us whether the architecture can encode correctness at all.
    if let Ok(n) = std::env::var("ORACLE_RM") {
        use rlsf_core::corpus::{render_target, wrong_answer, Style};
        use rlsf_core::preference::{PairMeta, PreferencePair};
        let n_oracle_prompts: usize = n.parse().unwrap_or(500);
        let oracle_lr: f64 = std::env::var("ORACLE_LR")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(5e-5);
        let oracle_batch: usize = std::env::var("ORACLE_BATCH")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(8);
        let oracle_style = std::env::var("ORACLE_STYLE").unwrap_or_else(|_| "both".into());
        let styles: &[Style] = match oracle_style.as_str() {
            "trace" => &[Style::ReasoningTrace],
            "direct" => &[Style::Direct],
            _ => &[Style::Direct, Style::ReasoningTrace],
        };
        let oracle_tasks = build_task_set_with(21, n_oracle_prompts, &opts).unwrap();
        let oracle_pairs: Vec<PreferencePair> = oracle_tasks
            .iter()
            .flat_map(|task| {
                let wrong = wrong_answer(task, 99);
                styles.iter().map(move |&style| PreferencePair {
                    prompt: task.prompt.clone(),
                    chosen: render_target(task, style, &task.gold),
                    rejected: render_target(task, style, &wrong),
                    gap: 1.0,
                    meta: PairMeta {
                        k_chosen: 0,
                        k_rejected: 1,
                        c_chosen: 1.0,
                        c_rejected: 0.0,
                    },
                })
            })
            .collect();
        let backbone = match std::env::var("ORACLE_D")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
        {
            Some(od) => {
                let mc = ModelConfig {
                    d_model: od,
                    n_heads: (od / 16).max(2),
                    ..mcfg
                };
                println!("oracle backbone: fresh init d{od} h{}", mc.n_heads);
                Policy::init(mc, 17).unwrap()
            }
            None => policy.clone(),
        };
        let t = Instant::now();
        let (rm2, rrep2) = train_reward_model(
            &backbone,
            &vocab,
            &oracle_pairs,
            &RewardConfig {
                lr: oracle_lr,
                batch_size: oracle_batch,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        println!(
            "oracle rm (lr {oracle_lr} batch {oracle_batch} style {oracle_style}): {:.1?}  {} pairs  train_acc {:.3}",
            t.elapsed(),
            oracle_pairs.len(),
            rrep2.train_accuracy
        );
        println!(
            "  epoch losses: {:?}",
            rrep2
                .epoch_losses
                .iter()
                .map(|x| (x * 1e4).round() / 1e4)
                .collect::<Vec<_>>()
        );
        let rb2 = reward_bench(&rm2, &vocab, &benchable, &policy, &cot).unwrap();
        println!("oracle rm reward_bench: acc {:.3}", rb2);
    }

    if ppo_iters == 0 {
        return;
    }

    let prompts: Vec<TokenSeq> = rlsf_tasks[..n_rollout]
        .iter()
        .map(|t| vocab.encode_prompt(&t.prompt).unwrap())
        .collect();
    let before_reward = mean_greedy_reward(&policy, &rm, &prompts, 64);
    let before_disp = mean_span_disparity(&policy, &vocab, &heldout, 64);
    let before_acc = out.summary.accuracy;
    println!("before ppo: greedy reward {before_reward:.4}  heldout disparity {before_disp:.4}  acc {before_acc:.3}");

    for seed in [100u64, 101, 102] {
        let mut p2 = policy.clone();
        let pcfg = PPOConfig {
            iterations: ppo_iters,
            seed,
            ..Default::default()
        };
        let t = Instant::now();
        let prep = ppo_train(&mut p2, &vocab, &rm, &prompts, &pcfg).unwrap();
        let train_t = t.elapsed();
        let after_reward = mean_greedy_reward(&p2, &rm, &prompts, 64);
        let after_disp = mean_span_disparity(&p2, &vocab, &heldout, 64);
        let after_out = evaluate_policy(&p2, &vocab, &heldout, &ecfg).unwrap();
        println!(
            "ppo seed {seed}: {train_t:.1?}  reward {before_reward:.4} -> {after_reward:.4}  disparity {before_disp:.4} -> {after_disp:.4} (d={:+.4})  acc {before_acc:.3} -> {:.3}  ece {:.3}  (rollout kl last {:.4})",
            after_disp - before_disp,
            after_out.summary.accuracy,
            after_out.summary.ece,
            prep.rows.last().map(|r| r.mean_kl).unwrap_or(f64::NAN),
        );
    }
}
