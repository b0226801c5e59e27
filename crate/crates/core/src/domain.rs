//! Shared data model: frame sequences, samples, responses, rollout groups
//! and reward breakdowns, plus the sequence primitives used everywhere else.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame token reserved for the separator run between concatenated segments.
pub const SEP: u32 = 0;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;

/// A non-empty sequence of frame tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameSeq(Vec<u32>);

impl FrameSeq {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Frames("frame sequence is empty".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains_sep(&self) -> bool {
        self.0.contains(&SEP)
    }

    pub fn is_palindrome(&self) -> bool {
        self.0.iter().eq(self.0.iter().rev())
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

pub fn reverse_frames(v: &FrameSeq) -> FrameSeq {
    FrameSeq(v.0.iter().rev().copied().collect())
}

/// Uniformly random permutation of `v` (Fisher-Yates).
pub fn shuffle_frames<R: Rng + ?Sized>(v: &FrameSeq, rng: &mut R) -> FrameSeq {
    let mut out = v.0.clone();
    out.shuffle(rng);
    FrameSeq(out)
}

/// `fwd ++ [SEP; sep_len] ++ rev`.
pub fn concat_with_separator(fwd: &FrameSeq, rev: &FrameSeq, sep_len: usize) -> Result<FrameSeq> {
    if sep_len == 0 {
        return Err(Error::Frames("sep_len must be at least 1".into()));
    }
    if fwd.contains_sep() || rev.contains_sep() {
        return Err(Error::Frames("input segment already contains SEP".into()));
    }
    let mut out = Vec::with_capacity(fwd.len() + sep_len + rev.len());
    out.extend_from_slice(&fwd.0);
    out.extend(std::iter::repeat(SEP).take(sep_len));
    out.extend_from_slice(&rev.0);
    Ok(FrameSeq(out))
}

/// Keep at most `max_frames` frames by uniform index sampling; the first and
/// last frames are always kept.
pub fn subsample_frames(v: &FrameSeq, max_frames: usize) -> FrameSeq {
    let n = v.len();
    if n <= max_frames || max_frames == 0 {
        return v.clone();
    }
    if max_frames == 1 {
        return FrameSeq(vec![v.0[0]]);
    }
    let idx = (0..max_frames).map(|i| {
        let x = i as f64 * (n - 1) as f64 / (max_frames - 1) as f64;
        x.round() as usize
    });
    FrameSeq(idx.map(|i| v.0[i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mcq,
    OpenQa,
    Caption,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Mcq => "mcq",
            TaskKind::OpenQa => "open_qa",
            TaskKind::Caption => "caption",
        })
    }
}

/// Fixed word-level text vocabulary. Ids 0..3 are BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| !w.is_empty() && !w.starts_with('<'))
            .collect();
        list.sort();
        list.dedup();
        let mut words = vec!["<bos>".to_string(), "<eos>".to_string(), "<unk>".to_string()];
        words.extend(list);
        Self::from_ordered(words)
    }

    /// Rebuild a vocabulary from an id-ordered word list (as stored in checkpoints).
    pub fn from_ordered(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    /// Whitespace tokenization of lowercased text; punctuation at word edges is dropped.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text).map(|w| self.id(&w)).collect()
    }

    /// Decode until EOS, skipping BOS.
    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t != BOS)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercased words with edge punctuation stripped.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
}

/// The normalized label of an answer or option text: its first word,
/// lowercased, punctuation stripped. `"A."`, `"a"` and `"A) foo"` all map to `"a"`.
pub fn normalize_label(text: &str) -> String {
    split_words(text).next().unwrap_or_default()
}

/// One training or evaluation question, in its `samples.jsonl` form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task: TaskKind,
    pub frames: Vec<u32>,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub answer: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    pub fn frame_seq(&self) -> Result<FrameSeq> {
        FrameSeq::new(self.frames.clone()).map_err(|e| self.invalid(e.to_string()))
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidSample {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn is_sensitive(&self) -> Option<bool> {
        self.meta.get("sensitive").map(|s| s == "true")
    }

    /// Check the structural invariants against vocabulary bounds.
    pub fn validate(&self, frame_vocab: usize, vocab: &Vocab) -> Result<()> {
        if self.frames.is_empty() {
            return Err(self.invalid("no frames"));
        }
        if let Some(bad) = self.frames.iter().find(|&&t| t as usize >= frame_vocab) {
            return Err(self.invalid(format!("frame token {bad} outside vocabulary of {frame_vocab}")));
        }
        match (self.task, &self.options) {
            (TaskKind::Mcq, None) => return Err(self.invalid("mcq sample without options")),
            (TaskKind::Mcq, Some(opts)) if opts.len() < 2 => {
                return Err(self.invalid("mcq sample needs at least two options"))
            }
            _ => {}
        }
        if self.task == TaskKind::Mcq {
            option_tokens(self, vocab)?;
            answer_index(self)?;
        }
        Ok(())
    }
}

/// Designated first token of each option. An option written as `"B. text"`
/// or `"B) text"` is designated by its letter; otherwise by its first word.
pub fn option_tokens(sample: &Sample, vocab: &Vocab) -> Result<Vec<u32>> {
    let options = sample.options.as_ref().ok_or_else(|| sample.invalid("no options"))?;
    let labels: Vec<String> = options.iter().map(|o| option_label(o)).collect();
    let mut tokens = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let tok = vocab.id(label);
        if tokens.contains(&tok) || labels[..i].contains(label) {
            return Err(Error::DuplicateOptionToken(label.clone()));
        }
        tokens.push(tok);
    }
    Ok(tokens)
}

pub fn option_label(option: &str) -> String {
    normalize_label(option)
}

/// Index of the option designated by the sample's answer.
pub fn answer_index(sample: &Sample) -> Result<usize> {
    let options = sample.options.as_ref().ok_or_else(|| sample.invalid("no options"))?;
    let want = normalize_label(&sample.answer);
    let hits: Vec<usize> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| option_label(o) == want)
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [i] => Ok(*i),
        [] => Err(sample.invalid(format!("answer {:?} matches no option", sample.answer))),
        _ => Err(sample.invalid(format!("answer {:?} matches several options", sample.answer))),
    }
}

/// A sample with its text fields mapped to token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub sample: Sample,
    pub frames: FrameSeq,
    pub query: Vec<u32>,
    /// Target response tokens: the designated option token for MCQ,
    /// otherwise the answer terminated by EOS.
    pub target: Vec<u32>,
    pub option_tokens: Option<Vec<u32>>,
    pub answer_index: Option<usize>,
}

impl EncodedSample {
    pub fn new(sample: &Sample, vocab: &Vocab, max_frames: usize) -> Result<Self> {
        let frames = subsample_frames(&sample.frame_seq()?, max_frames);
        let query = vocab.tokenize(&sample.query);
        let (option_tokens, answer_index, target) = if sample.task == TaskKind::Mcq {
            let toks = option_tokens(sample, vocab)?;
            let idx = answer_index(sample)?;
            let target = vec![toks[idx]];
            (Some(toks), Some(idx), target)
        } else {
            let mut t = vocab.tokenize(&sample.answer);
            t.push(EOS);
            (None, None, t)
        };
        Ok(Self {
            sample: sample.clone(),
            frames,
            query,
            target,
            option_tokens,
            answer_index,
        })
    }

    pub fn id(&self) -> &str {
        &self.sample.id
    }

    pub fn task(&self) -> TaskKind {
        self.sample.task
    }

    /// Tokens decoding may emit: the option tokens for MCQ, anything otherwise.
    pub fn decode_mask(&self) -> Option<&[u32]> {
        self.option_tokens.as_deref()
    }

    /// Response length cap: MCQ answers are a single option token.
    pub fn response_cap(&self, max_len: usize) -> usize {
        if self.option_tokens.is_some() {
            max_len.min(1)
        } else {
            max_len
        }
    }
}

pub fn encode_all(samples: &[Sample], vocab: &Vocab, max_frames: usize) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .map(|s| EncodedSample::new(s, vocab, max_frames))
        .collect()
}

pub fn write_samples_jsonl<W: Write>(mut out: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples_jsonl<R: BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// A generated token sequence with per-token natural log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<u32>,
    pub token_logprobs: Vec<f64>,
    pub policy_tag: String,
}

impl Response {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub fidelity: f64,
    pub reverse: f64,
    pub alpha_applied: f64,
    /// Similarity between the reverse response and the target.
    pub gate_similarity: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(fidelity: f64, reverse: f64, alpha_applied: f64, gate_similarity: f64) -> Self {
        Self {
            fidelity,
            reverse,
            alpha_applied,
            gate_similarity,
            total: fidelity + alpha_applied * reverse,
        }
    }

    pub fn gated_off(&self) -> bool {
        self.alpha_applied == 0.0
    }
}

/// G candidates for one sample, the reverse-conditioned response, and
/// their reward breakdowns and advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub sample_id: String,
    pub sample_index: usize,
    pub candidates: Vec<Response>,
    pub reverse_response: Response,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

impl RolloutGroup {
    pub fn check(&self) -> Result<()> {
        let g = self.candidates.len();
        if g < 2 {
            return Err(Error::Length { expected: 2, actual: g });
        }
        for len in [self.rewards.len(), self.advantages.len()] {
            if len != g {
                return Err(Error::Length { expected: g, actual: len });
            }
        }
        Ok(())
    }
}

/// Optimizer and rollout hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub max_frames: usize,
    pub rollout_temperature: f64,
    pub reverse_temperature: f64,
    pub batch_size: usize,
    /// Gradient updates per rollout batch; values above 1 exercise clipping.
    pub inner_epochs: usize,
    pub momentum: f64,
    /// Maximum generated response length, EOS included.
    pub max_response_len: usize,
    /// Reuse a sample's reverse response across steps instead of regenerating it.
    pub cache_reverse: bool,
    /// Global gradient-norm clip applied before each update, if set.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.5,
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            steps: 2000,
            learning_rate: 0.5,
            seed: 0,
            max_frames: 16,
            rollout_temperature: 1.0,
            reverse_temperature: 0.0,
            batch_size: 4,
            inner_epochs: 1,
            momentum: 0.0,
            max_response_len: 4,
            cache_reverse: false,
            max_grad_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        if !(self.alpha >= 0.0) {
            return fail("alpha must be non-negative");
        }
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail("clip_epsilon must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0) {
            return fail("kl_beta must be non-negative");
        }
        if self.max_frames == 0 || self.batch_size == 0 || self.inner_epochs == 0 {
            return fail("max_frames, batch_size and inner_epochs must be positive");
        }
        if self.max_response_len == 0 {
            return fail("max_response_len must be positive");
        }
        if !(self.rollout_temperature >= 0.0 && self.reverse_temperature >= 0.0) {
            return fail("temperatures must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}
