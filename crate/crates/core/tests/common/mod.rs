#![allow(dead_code)]

use std::collections::BTreeMap;

use arrowrl::domain::{EncodedSample, RewardBreakdown, RolloutGroup, Sample, TaskKind, TrainConfig, Vocab};
use arrowrl::grpo::grpo_loss_and_grad;
use arrowrl::policy::{InitScale, PolicyDims, PolicyParams, RolloutPolicy, ToyPolicy};
use arrowrl::rng::stream_rng;
use rand::Rng;

pub fn tiny_vocab() -> Vocab {
    Vocab::new(["a", "b", "level", "rises", "falls", "what", "happens", "which"])
}

pub fn tiny_dims(vocab: &Vocab) -> PolicyDims {
    PolicyDims { frame_vocab: 7, text_vocab: vocab.len(), max_frames: 6, d: 8 }
}

pub fn random_policy(dims: PolicyDims, seed: u64) -> PolicyParams {
    PolicyParams::init_with(dims, InitScale { embed: 1.0, dense: 0.5 }, &mut stream_rng(seed, "test-init", 0))
}

/// `p` with every value moved by up to `noise`.
pub fn jitter(p: &PolicyParams, noise: f64, seed: u64) -> PolicyParams {
    let mut rng = stream_rng(seed, "jitter", 0);
    let mut q = p.clone();
    for (_, t) in q.t.iter_mut() {
        for v in t.data.iter_mut() {
            *v += rng.gen_range(-noise..=noise);
        }
    }
    q
}

pub fn sample(id: &str, task: TaskKind, frames: Vec<u32>, query: &str, options: Option<&[&str]>, answer: &str) -> Sample {
    Sample {
        id: id.into(),
        task,
        frames,
        query: query.into(),
        options: options.map(|o| o.iter().map(|s| s.to_string()).collect()),
        answer: answer.into(),
        meta: BTreeMap::new(),
    }
}

pub fn random_frames<R: Rng>(rng: &mut R, dims: &PolicyDims) -> Vec<u32> {
    let n = rng.gen_range(2..=dims.max_frames);
    (0..n).map(|_| rng.gen_range(1..dims.frame_vocab as u32)).collect()
}

/// One MCQ and one open-QA sample over the tiny vocabulary.
pub fn tiny_samples<R: Rng>(rng: &mut R, vocab: &Vocab, dims: &PolicyDims) -> Vec<EncodedSample> {
    let mcq = sample(
        "m",
        TaskKind::Mcq,
        random_frames(rng, dims),
        "which level",
        Some(&["A. rises", "B. falls"]),
        "B",
    );
    let qa = sample("q", TaskKind::OpenQa, random_frames(rng, dims), "what happens", None, "level rises");
    [mcq, qa]
        .iter()
        .map(|s| EncodedSample::new(s, vocab, dims.max_frames).unwrap())
        .collect()
}

/// One GRPO instance: a policy, a perturbed rollout policy and reference,
/// and G-candidate groups with arbitrary advantages (one group degenerate).
pub struct GradInstance {
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    pub samples: Vec<EncodedSample>,
    pub groups: Vec<RolloutGroup>,
    pub cfg: TrainConfig,
}

pub fn grad_instance(seed: u64, group_size: usize) -> GradInstance {
    let vocab = tiny_vocab();
    let dims = tiny_dims(&vocab);
    let mut rng = stream_rng(seed, "fd-instance", 0);
    let policy = random_policy(dims, seed);
    let old = jitter(&policy, 0.15, seed ^ 1);
    let reference = jitter(&policy, 0.15, seed ^ 2);
    let samples = tiny_samples(&mut rng, &vocab, &dims);
    let rollout = ToyPolicy::new(&old, "old");
    let mut groups = Vec::new();
    for (idx, enc) in samples.iter().enumerate() {
        let candidates: Vec<_> = (0..group_size)
            .map(|i| rollout.sample(enc, &enc.frames, 1.0, 3, seed * 100 + (idx * 10 + i) as u64).unwrap())
            .collect();
        let degenerate = idx == 1 && seed % 2 == 0;
        let advantages: Vec<f64> = if degenerate {
            vec![0.0; group_size]
        } else {
            (0..group_size).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        groups.push(RolloutGroup {
            sample_id: enc.id().into(),
            sample_index: idx,
            reverse_response: candidates[0].clone(),
            candidates,
            rewards: vec![RewardBreakdown::new(0.0, 0.0, 0.0, 0.0); group_size],
            advantages,
            degenerate,
        });
    }
    let cfg = TrainConfig {
        group_size,
        kl_beta: rng.gen_range(0.0..0.5),
        clip_epsilon: 0.2,
        ..TrainConfig::default()
    };
    GradInstance { policy, reference, samples, groups, cfg }
}

pub fn objective(inst: &GradInstance, p: &PolicyParams) -> f64 {
    -grpo_loss_and_grad(p, &inst.reference, &inst.groups, &inst.samples, &inst.cfg).unwrap().0
}

/// Add `delta` to flat component `j` of `p`.
pub fn nudge(p: &mut PolicyParams, mut j: usize, delta: f64) {
    for (_, t) in p.t.iter_mut() {
        if j < t.data.len() {
            t.data[j] += delta;
            return;
        }
        j -= t.data.len();
    }
    panic!("component out of range");
}

/// Worst per-component relative error between the analytic gradient and
/// central differences. Components whose magnitudes are both below `floor`
/// are compared absolutely against `floor`.
pub fn fd_check(inst: &GradInstance, h: f64, floor: f64) -> (f64, usize) {
    let (_, grad, _) = grpo_loss_and_grad(&inst.policy, &inst.reference, &inst.groups, &inst.samples, &inst.cfg).unwrap();
    let analytic = grad.flat();
    let mut worst: f64 = 0.0;
    for (j, &a) in analytic.iter().enumerate() {
        let mut plus = inst.policy.clone();
        nudge(&mut plus, j, h);
        let mut minus = inst.policy.clone();
        nudge(&mut minus, j, -h);
        let fd = (objective(inst, &plus) - objective(inst, &minus)) / (2.0 * h);
        let scale = a.abs().max(fd.abs()).max(floor);
        worst = worst.max((a - fd).abs() / scale);
    }
    (worst, analytic.len())
}
