//! Held-out evaluation of a toy policy on synthetic-world samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{reverse_frames, split_words, EncodedSample, Vocab};
use crate::error::Result;
use crate::judge::{lexical_similarity, Judge, JudgeMode};
use crate::policy::{first_token_option_probs, sample_response, PolicyParams};
use crate::reward::{fidelity_prompt, gate_alpha, similarity, RewardConfig, SimilarityKind};
use crate::rng::stream_rng;
use crate::synthworld::WorldTask;

pub fn world_task(enc: &EncodedSample) -> Option<WorldTask> {
    enc.sample.meta.get("format").and_then(|f| WorldTask::parse(f))
}

/// Temperature-0 response text.
pub fn greedy_text(policy: &PolicyParams, enc: &EncodedSample, reversed: bool, max_len: usize, vocab: &Vocab) -> String {
    let frames = if reversed { reverse_frames(&enc.frames) } else { enc.frames.clone() };
    // the rng is never consulted at temperature 0
    let mut rng = stream_rng(0, "greedy", 0);
    let r = sample_response(policy, &enc.query, &frames, enc.decode_mask(), 0.0, enc.response_cap(max_len), &mut rng);
    vocab.decode(&r.tokens)
}

/// Same words with the same multiplicities, in any order.
pub fn bag_match(a: &str, b: &str) -> bool {
    let bag = |s: &str| {
        let mut w: Vec<String> = split_words(s).collect();
        w.sort();
        w
    };
    bag(a) == bag(b)
}

fn option_correct(policy: &PolicyParams, enc: &EncodedSample) -> Result<bool> {
    let p = first_token_option_probs(policy, enc, &enc.frames)?;
    Ok(Some(p.argmax()) == enc.answer_index)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Argmax-option accuracy on direction samples with a planted direction.
    pub direction_accuracy: Option<f64>,
    pub caption_match_accuracy: Option<f64>,
    /// Greedy caption matches the target as a bag of words.
    pub caption_accuracy: Option<f64>,
    pub open_qa_accuracy: Option<f64>,
    /// Mean of the available per-task accuracies.
    pub composite_accuracy: f64,
    /// Mean `1 − lexical(greedy forward, greedy reversed)` over sensitive caption samples.
    pub caption_divergence: Option<f64>,
    /// Fraction of insensitive non-direction samples whose gate is off.
    pub gate_off_insensitive: Option<f64>,
    /// Fraction of sensitive non-direction samples whose gate is on.
    pub gate_on_sensitive: Option<f64>,
}

impl EvalReport {
    /// The single number tracked per step: direction accuracy when available.
    pub fn headline(&self) -> f64 {
        self.direction_accuracy.unwrap_or(self.composite_accuracy)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Default)]
struct Tally {
    direction: Vec<f64>,
    caption_match: Vec<f64>,
    caption: Vec<f64>,
    open_qa: Vec<f64>,
    divergence: Vec<f64>,
    gate_off_insensitive: Vec<f64>,
    gate_on_sensitive: Vec<f64>,
}

/// Evaluate `policy` on `samples`. Gating uses the lexical judge and exact MCQ matching.
pub fn evaluate(
    policy: &PolicyParams,
    samples: &[EncodedSample],
    vocab: &Vocab,
    reward: &RewardConfig,
    max_len: usize,
) -> Result<EvalReport> {
    let judge = Judge::lexical();
    let rows: Vec<Result<(Option<WorldTask>, Option<bool>, f64, Option<f64>, Option<f64>)>> = samples
        .par_iter()
        .map(|enc| {
            let task = world_task(enc);
            let sensitive = enc.sample.is_sensitive();
            let target = vocab.decode(&enc.target);
            let acc = match task {
                Some(WorldTask::Direction) | Some(WorldTask::CaptionMatch) => {
                    f64::from(u8::from(option_correct(policy, enc)?))
                }
                _ => f64::from(u8::from(bag_match(&greedy_text(policy, enc, false, max_len, vocab), &target))),
            };
            let divergence = if task == Some(WorldTask::Caption) && sensitive == Some(true) {
                let f = greedy_text(policy, enc, false, max_len, vocab);
                let r = greedy_text(policy, enc, true, max_len, vocab);
                Some(1.0 - lexical_similarity(&f, &r))
            } else {
                None
            };
            let alpha = if task.is_some() && task != Some(WorldTask::Direction) {
                let o_tilde = greedy_text(policy, enc, true, max_len, vocab);
                let kind = SimilarityKind::for_task(enc.task(), JudgeMode::Lexical);
                let sim = similarity(kind, fidelity_prompt(enc.task()), &o_tilde, &target, &enc.sample.query, &judge)?;
                Some(gate_alpha(sim, reward))
            } else {
                None
            };
            Ok((task, sensitive, acc, divergence, alpha))
        })
        .collect();

    let mut t = Tally::default();
    for row in rows {
        let (task, sensitive, acc, divergence, alpha) = row?;
        match task {
            Some(WorldTask::Direction) => {
                if sensitive != Some(false) {
                    t.direction.push(acc)
                }
            }
            Some(WorldTask::CaptionMatch) => t.caption_match.push(acc),
            Some(WorldTask::Caption) => t.caption.push(acc),
            Some(WorldTask::OpenQa) | None => t.open_qa.push(acc),
        }
        if let Some(d) = divergence {
            t.divergence.push(d);
        }
        if let Some(a) = alpha {
            match sensitive {
                Some(true) => t.gate_on_sensitive.push(f64::from(u8::from(a == reward.alpha))),
                Some(false) => t.gate_off_insensitive.push(f64::from(u8::from(a == 0.0))),
                None => {}
            }
        }
    }
    let parts: Vec<f64> = [&t.direction, &t.caption_match, &t.caption, &t.open_qa]
        .into_iter()
        .filter_map(|v| mean(v))
        .collect();
    Ok(EvalReport {
        direction_accuracy: mean(&t.direction),
        caption_match_accuracy: mean(&t.caption_match),
        caption_accuracy: mean(&t.caption),
        open_qa_accuracy: mean(&t.open_qa),
        composite_accuracy: mean(&parts).unwrap_or(0.0),
        caption_divergence: mean(&t.divergence),
        gate_off_insensitive: mean(&t.gate_off_insensitive),
        gate_on_sensitive: mean(&t.gate_on_sensitive),
    })
}
