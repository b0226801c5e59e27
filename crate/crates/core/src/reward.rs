//! Reward algebra: fidelity to the target, divergence from the reverse
//! response, and the per-sample gate that switches the latter off.

use serde::{Deserialize, Serialize};

use crate::domain::{normalize_label, RewardBreakdown, TaskKind};
use crate::judge::{lexical_similarity, Judge, JudgeError, JudgeMode, PromptKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    ExactMcq,
    Lexical,
    RemoteJudge,
}

impl SimilarityKind {
    /// Exact label matching for MCQ; otherwise whatever the judge is configured as.
    pub fn for_task(task: TaskKind, mode: JudgeMode) -> Self {
        match (task, mode) {
            (TaskKind::Mcq, _) => SimilarityKind::ExactMcq,
            (_, JudgeMode::Lexical) => SimilarityKind::Lexical,
            (_, JudgeMode::Remote) => SimilarityKind::RemoteJudge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { alpha: 0.5, gamma: 0.5 }
    }
}

pub fn exact_mcq(a: &str, b: &str) -> f64 {
    if normalize_label(a) == normalize_label(b) {
        1.0
    } else {
        0.0
    }
}

pub fn similarity(
    kind: SimilarityKind,
    prompt: PromptKind,
    a: &str,
    b: &str,
    query: &str,
    judge: &Judge,
) -> Result<f64, JudgeError> {
    match kind {
        SimilarityKind::ExactMcq => Ok(exact_mcq(a, b)),
        SimilarityKind::Lexical => Ok(lexical_similarity(a, b)),
        SimilarityKind::RemoteJudge => judge.similarity(prompt, a, b, query).map(|s| s.clamp(0.0, 1.0)),
    }
}

/// Judge prompt for candidate-vs-target comparisons.
pub fn fidelity_prompt(task: TaskKind) -> PromptKind {
    match task {
        TaskKind::Caption => PromptKind::CaptionVsTarget,
        _ => PromptKind::QaPair,
    }
}

/// Judge prompt for candidate-vs-reverse-response comparisons.
pub fn reverse_prompt(_task: TaskKind) -> PromptKind {
    PromptKind::QaPair
}

pub fn fidelity_reward(
    o_i: &str,
    o_star: &str,
    kind: SimilarityKind,
    task: TaskKind,
    query: &str,
    judge: &Judge,
) -> Result<f64, JudgeError> {
    similarity(kind, fidelity_prompt(task), o_i, o_star, query, judge)
}

pub fn reverse_reward(
    o_i: &str,
    o_tilde: &str,
    kind: SimilarityKind,
    task: TaskKind,
    query: &str,
    judge: &Judge,
) -> Result<f64, JudgeError> {
    Ok(1.0 - similarity(kind, reverse_prompt(task), o_i, o_tilde, query, judge)?)
}

/// `0` when the reverse response already matches the target (`sim > γ`), else `α`.
pub fn gate_alpha(sim_tilde_star: f64, cfg: &RewardConfig) -> f64 {
    if sim_tilde_star > cfg.gamma {
        0.0
    } else {
        cfg.alpha
    }
}

/// Decoded texts of one rollout group.
#[derive(Debug, Clone, Copy)]
pub struct GroupTexts<'a> {
    pub task: TaskKind,
    pub query: &'a str,
    pub target: &'a str,
    pub reverse: &'a str,
}

/// One breakdown per candidate. The gate similarity is computed once and shared.
pub fn evaluate_group(
    texts: GroupTexts<'_>,
    candidates: &[String],
    cfg: &RewardConfig,
    judge: &Judge,
) -> Result<Vec<RewardBreakdown>, JudgeError> {
    let kind = SimilarityKind::for_task(texts.task, judge.mode());
    let gate_sim = similarity(kind, fidelity_prompt(texts.task), texts.reverse, texts.target, texts.query, judge)?;
    let alpha_i = gate_alpha(gate_sim, cfg);
    candidates
        .iter()
        .map(|c| {
            let fid = fidelity_reward(c, texts.target, kind, texts.task, texts.query, judge)?;
            let rev = reverse_reward(c, texts.reverse, kind, texts.task, texts.query, judge)?;
            Ok(RewardBreakdown::new(fid, rev, alpha_i, gate_sim))
        })
        .collect()
}
