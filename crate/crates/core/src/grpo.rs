//! Group-relative policy optimization: advantages, clipped surrogate with a
//! k3 KL penalty, the rollout/update step, and a supervised baseline step.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{reverse_frames, EncodedSample, Response, RolloutGroup, TrainConfig, Vocab};
use crate::error::{Error, Result};
use crate::judge::Judge;
use crate::policy::{
    accumulate_weighted_logprob_grad, response_logprobs, GradientAccumulator, PolicyParams, RolloutPolicy, ToyPolicy,
};
use crate::reward::{evaluate_group, GroupTexts, RewardConfig};
use crate::rng::{derive_seed, stream_rng};

/// Below this population standard deviation a group counts as degenerate.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Group-normalized advantages with the population standard deviation.
/// Returns zeros and `true` for a degenerate group.
pub fn normalize_advantages(rewards: &[f64]) -> (Vec<f64>, bool) {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= DEGENERATE_STD) {
        return (vec![0.0; rewards.len()], true);
    }
    (rewards.iter().map(|r| (r - mean) / std).collect(), false)
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)` with `r = exp(logp_new − logp_old)`.
pub fn token_surrogate(logp_new: f64, logp_old: f64, advantage: f64, epsilon: f64) -> f64 {
    let ratio = (logp_new - logp_old).exp();
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`token_surrogate`] with respect to `logp_new`.
pub fn token_surrogate_grad(logp_new: f64, logp_old: f64, advantage: f64, epsilon: f64) -> f64 {
    let ratio = (logp_new - logp_old).exp();
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    if clipped == ratio || ratio * advantage < clipped * advantage {
        ratio * advantage
    } else {
        0.0
    }
}

/// k3 estimator `u − ln u − 1` with `u = exp(logp_ref − logp_theta)`.
pub fn kl_penalty(logp_theta: f64, logp_ref: f64) -> f64 {
    let x = logp_ref - logp_theta;
    // u − ln u − 1 with ln u = x; exp_m1 keeps precision near zero
    x.exp_m1() - x
}

/// Derivative of [`kl_penalty`] with respect to `logp_theta`: `1 − u`.
pub fn kl_penalty_grad(logp_theta: f64, logp_ref: f64) -> f64 {
    -(logp_ref - logp_theta).exp_m1()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectiveStats {
    pub objective: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub tokens: usize,
}

/// `−J` and `∇J` for the given groups. `groups[g].sample_index` indexes `samples`.
/// Recorded `token_logprobs` of each candidate are the rollout-policy values.
/// The returned gradient is the ascent direction for `J`.
pub fn grpo_loss_and_grad(
    policy: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    samples: &[EncodedSample],
    cfg: &TrainConfig,
) -> Result<(f64, GradientAccumulator, ObjectiveStats)> {
    let mut grad = GradientAccumulator::zeros(policy.dims);
    if groups.is_empty() {
        return Ok((0.0, grad, ObjectiveStats::default()));
    }
    for g in groups {
        g.check()?;
        if g.sample_index >= samples.len() {
            return Err(Error::Length { expected: samples.len(), actual: g.sample_index + 1 });
        }
        for c in &g.candidates {
            if c.token_logprobs.len() != c.tokens.len() {
                return Err(Error::Length { expected: c.tokens.len(), actual: c.token_logprobs.len() });
            }
        }
    }
    let scale_groups = 1.0 / groups.len() as f64;

    let parts: Vec<Result<(GradientAccumulator, f64, usize, f64, usize)>> = groups
        .par_iter()
        .map(|g| {
            let enc = &samples[g.sample_index];
            let mut local = GradientAccumulator::zeros(policy.dims);
            let mut obj = 0.0;
            let mut clipped = 0usize;
            let mut kl_sum = 0.0;
            let mut tokens = 0usize;
            let scale_g = scale_groups / g.candidates.len() as f64;
            for (cand, &adv) in g.candidates.iter().zip(&g.advantages) {
                if cand.tokens.is_empty() {
                    continue;
                }
                let scale = scale_g / cand.tokens.len() as f64;
                let lp_new = response_logprobs(policy, &enc.query, &enc.frames, enc.decode_mask(), &cand.tokens);
                let lp_ref = response_logprobs(reference, &enc.query, &enc.frames, enc.decode_mask(), &cand.tokens);
                let mut weights = Vec::with_capacity(cand.tokens.len());
                for t in 0..cand.tokens.len() {
                    let (lp, lp_old, lr) = (lp_new[t], cand.token_logprobs[t], lp_ref[t]);
                    let surr = token_surrogate(lp, lp_old, adv, cfg.clip_epsilon);
                    let kl = kl_penalty(lp, lr);
                    obj += scale * (surr - cfg.kl_beta * kl);
                    let ratio = (lp - lp_old).exp();
                    if ratio < 1.0 - cfg.clip_epsilon || ratio > 1.0 + cfg.clip_epsilon {
                        clipped += 1;
                    }
                    kl_sum += kl;
                    tokens += 1;
                    let dsurr = token_surrogate_grad(lp, lp_old, adv, cfg.clip_epsilon);
                    weights.push(scale * (dsurr - cfg.kl_beta * kl_penalty_grad(lp, lr)));
                }
                accumulate_weighted_logprob_grad(policy, &enc.query, &enc.frames, enc.decode_mask(), &cand.tokens, &weights, &mut local)?;
            }
            Ok((local, obj, clipped, kl_sum, tokens))
        })
        .collect();

    let mut stats = ObjectiveStats::default();
    let mut clipped = 0usize;
    let mut kl_sum = 0.0;
    for part in parts {
        let (local, obj, c, k, n) = part?;
        grad.add_assign(&local)?;
        stats.objective += obj;
        clipped += c;
        kl_sum += k;
        stats.tokens += n;
    }
    if stats.tokens > 0 {
        stats.clip_fraction = clipped as f64 / stats.tokens as f64;
        stats.mean_kl = kl_sum / stats.tokens as f64;
    }
    Ok((-stats.objective, grad, stats))
}

/// Mean per-token log-likelihood of the targets and its gradient.
pub fn sft_objective_and_grad(policy: &PolicyParams, batch: &[&EncodedSample]) -> Result<(f64, GradientAccumulator)> {
    let mut grad = GradientAccumulator::zeros(policy.dims);
    let mut value = 0.0;
    let parts: Vec<Result<(GradientAccumulator, f64)>> = batch
        .par_iter()
        .map(|enc| {
            let mut local = GradientAccumulator::zeros(policy.dims);
            let w = 1.0 / (enc.target.len() as f64 * batch.len() as f64);
            let weights = vec![w; enc.target.len()];
            let v = accumulate_weighted_logprob_grad(policy, &enc.query, &enc.frames, enc.decode_mask(), &enc.target, &weights, &mut local)?;
            Ok((local, v))
        })
        .collect();
    for p in parts {
        let (local, v) = p?;
        grad.add_assign(&local)?;
        value += v;
    }
    Ok((value, grad))
}

/// Per-step diagnostics, one `metrics.csv` row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_fidelity: f64,
    pub mean_reverse: f64,
    pub gate_off_fraction: f64,
    pub mean_advantage: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub groups_degenerate: usize,
    /// Groups dropped because the judge failed.
    pub groups_skipped: usize,
    pub loss: f64,
}

/// Mutable trainer state: live parameters, frozen reference, optimizer memory.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub velocity: Option<GradientAccumulator>,
    /// Number of completed steps.
    pub step: usize,
    pub reverse_cache: BTreeMap<usize, Response>,
}

impl TrainState {
    pub fn new(params: PolicyParams) -> Self {
        Self {
            reference: params.snapshot(),
            params,
            velocity: None,
            step: 0,
            reverse_cache: BTreeMap::new(),
        }
    }

    /// Optional norm clip, optional momentum, then `θ ← θ + lr·v`.
    pub fn apply(&mut self, mut grad: GradientAccumulator, cfg: &TrainConfig) -> Result<()> {
        if let Some(max) = cfg.max_grad_norm {
            let n = grad.norm();
            if n > max && n > 0.0 {
                grad.scale(max / n);
            }
        }
        if cfg.momentum > 0.0 {
            let v = self.velocity.get_or_insert_with(|| GradientAccumulator::zeros(grad.dims));
            v.scale(cfg.momentum);
            v.add_assign(&grad)?;
            let v = v.clone();
            self.params.apply_update(&v, cfg.learning_rate)
        } else {
            self.params.apply_update(&grad, cfg.learning_rate)
        }
    }
}

/// Sample indices for `step`, drawn without replacement from a per-step stream.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch_size: usize) -> Vec<usize> {
    use rand::seq::index::sample;
    let mut rng = stream_rng(seed, "batch", step as u64);
    sample(&mut rng, n, batch_size.min(n)).into_vec()
}

pub fn rollout_seed(seed: u64, step: usize, slot: usize, candidate: usize) -> u64 {
    derive_seed(seed, "rollout", ((step as u64) << 24) ^ ((slot as u64) << 8) ^ candidate as u64)
}

/// Candidates and the reverse response for one sample. `seeds(i)` seeds
/// candidate `i`; `seeds(G)` seeds the reverse response.
pub fn rollout_group(
    rollout: &dyn RolloutPolicy,
    enc: &EncodedSample,
    cfg: &TrainConfig,
    seeds: impl Fn(usize) -> u64,
    cached_reverse: Option<&Response>,
) -> Result<(Vec<Response>, Response)> {
    let candidates = (0..cfg.group_size)
        .map(|i| rollout.sample(enc, &enc.frames, cfg.rollout_temperature, cfg.max_response_len, seeds(i)))
        .collect::<Result<Vec<_>>>()?;
    let reverse = match cached_reverse {
        Some(r) => r.clone(),
        None => rollout.sample(
            enc,
            &reverse_frames(&enc.frames),
            cfg.reverse_temperature,
            cfg.max_response_len,
            seeds(cfg.group_size),
        )?,
    };
    Ok((candidates, reverse))
}

/// One GRPO step on the samples at `batch`. A step whose groups all fail on
/// the judge leaves the parameters untouched.
pub fn train_step(
    state: &mut TrainState,
    samples: &[EncodedSample],
    batch: &[usize],
    vocab: &Vocab,
    judge: &Judge,
    cfg: &TrainConfig,
) -> Result<GrpoStepStats> {
    let step = state.step;
    let old = state.params.snapshot();
    let rollout = ToyPolicy::new(&old, format!("old@{step}"));
    let reward_cfg = RewardConfig { alpha: cfg.alpha, gamma: cfg.gamma };

    let outcomes: Vec<Result<std::result::Result<RolloutGroup, String>>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, &idx)| {
            let enc = &samples[idx];
            let cached = if cfg.cache_reverse { state.reverse_cache.get(&idx) } else { None };
            let (candidates, reverse) =
                rollout_group(&rollout, enc, cfg, |i| rollout_seed(cfg.seed, step, slot, i), cached)?;
            let texts: Vec<String> = candidates.iter().map(|c| vocab.decode(&c.tokens)).collect();
            let target = vocab.decode(&enc.target);
            let reverse_text = vocab.decode(&reverse.tokens);
            let group_texts = GroupTexts {
                task: enc.task(),
                query: &enc.sample.query,
                target: &target,
                reverse: &reverse_text,
            };
            match evaluate_group(group_texts, &texts, &reward_cfg, judge) {
                Ok(rewards) => {
                    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
                    let (advantages, degenerate) = normalize_advantages(&totals);
                    Ok(Ok(RolloutGroup {
                        sample_id: enc.id().to_string(),
                        sample_index: idx,
                        candidates,
                        reverse_response: reverse,
                        rewards,
                        advantages,
                        degenerate,
                    }))
                }
                Err(e) => Ok(Err(format!("{}: {e}", enc.id()))),
            }
        })
        .collect();

    let mut groups = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for o in outcomes {
        match o? {
            Ok(g) => groups.push(g),
            Err(msg) => {
                tracing::warn!(step, "skipping group after judge failure: {msg}");
                skipped += 1;
            }
        }
    }
    if cfg.cache_reverse {
        for g in &groups {
            state.reverse_cache.entry(g.sample_index).or_insert_with(|| g.reverse_response.clone());
        }
    }

    let mut stats = GrpoStepStats { step, groups_skipped: skipped, ..Default::default() };
    if groups.is_empty() {
        tracing::warn!(step, "every group in the batch was skipped; no update");
        state.step += 1;
        return Ok(stats);
    }

    let n_cand: usize = groups.iter().map(|g| g.rewards.len()).sum();
    for g in &groups {
        for r in &g.rewards {
            stats.mean_reward += r.total;
            stats.mean_fidelity += r.fidelity;
            stats.mean_reverse += r.reverse;
        }
        stats.mean_advantage += g.advantages.iter().sum::<f64>();
        if g.rewards.first().is_some_and(|r| r.gated_off()) {
            stats.gate_off_fraction += 1.0;
        }
        if g.degenerate {
            stats.groups_degenerate += 1;
        }
    }
    stats.mean_reward /= n_cand as f64;
    stats.mean_fidelity /= n_cand as f64;
    stats.mean_reverse /= n_cand as f64;
    stats.mean_advantage /= n_cand as f64;
    stats.gate_off_fraction /= groups.len() as f64;

    for epoch in 0..cfg.inner_epochs {
        let (loss, grad, obj) = grpo_loss_and_grad(&state.params, &state.reference, &groups, samples, cfg)?;
        if epoch == 0 {
            stats.loss = loss;
            stats.clip_fraction = obj.clip_fraction;
            stats.mean_kl = obj.mean_kl;
        } else {
            stats.clip_fraction = stats.clip_fraction.max(obj.clip_fraction);
        }
        state.apply(grad, cfg)?;
    }
    if !state.params.all_finite() {
        return Err(Error::Shape(format!("non-finite parameters after step {step}")));
    }
    state.step += 1;
    Ok(stats)
}

/// One supervised step on the target responses of `batch`.
pub fn sft_step(
    state: &mut TrainState,
    samples: &[EncodedSample],
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<GrpoStepStats> {
    let refs: Vec<&EncodedSample> = batch.iter().map(|&i| &samples[i]).collect();
    let (value, grad) = sft_objective_and_grad(&state.params, &refs)?;
    state.apply(grad, cfg)?;
    let stats = GrpoStepStats { step: state.step, loss: -value, ..Default::default() };
    state.step += 1;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_for_single_success() {
        let mut r = vec![0.0; 8];
        r[0] = 1.0;
        let (a, deg) = normalize_advantages(&r);
        assert!(!deg);
        assert!((a[0] - 7f64.sqrt()).abs() < 1e-12);
        for v in &a[1..] {
            assert!((v + 1.0 / 7f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_rewards_are_degenerate() {
        let (a, deg) = normalize_advantages(&[0.3; 5]);
        assert!(deg);
        assert!(a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn surrogate_examples() {
        let lr = 1.5f64.ln();
        assert!((token_surrogate(lr, 0.0, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((token_surrogate(lr, 0.0, -1.0, 0.2) + 1.5).abs() < 1e-12);
        assert_eq!(token_surrogate(-0.7, -0.7, 0.37, 0.2), 0.37);
        assert_eq!(token_surrogate_grad(lr, 0.0, 1.0, 0.2), 0.0);
        assert!((token_surrogate_grad(lr, 0.0, -1.0, 0.2) + 1.5).abs() < 1e-12);
    }

    #[test]
    fn k3_examples() {
        assert_eq!(kl_penalty(-1.3, -1.3), 0.0);
        let u2 = kl_penalty(0.0, 2f64.ln());
        assert!((u2 - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((u2 - 0.306853).abs() < 1e-6);
    }

    #[test]
    fn batches_are_seeded_and_distinct() {
        let a = batch_indices(3, 7, 50, 4);
        assert_eq!(a, batch_indices(3, 7, 50, 4));
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 4);
        assert_eq!(batch_indices(0, 0, 2, 4).len(), 2);
    }
}
