//! Forward pass, sampling and exact backpropagation for the toy policy.
//!
//! Context: `c = mean_t(frame_embed[v_t] ⊙ pos_embed[t]) + mean_j(text_embed[l_j])`.
//! Decoder: `h_t = tanh(W_c·c + W_p·text_embed[o_{t-1}] + W_h·h_{t-1} + b_h)`,
//! `logits_t = U·h_t + b_o`, with `h_0 = 0` and `o_0 = BOS`.
//!
//! Every function taking a `mask` restricts each step's softmax to the listed
//! token ids (constrained decoding, used for MCQ answers).

use rand::Rng;

use super::params::{dot, GradientAccumulator, PolicyParams};
use crate::domain::{FrameSeq, Response, BOS, EOS};
use crate::error::{Error, Result};

/// Encoder output: the context vector.
pub fn context(policy: &PolicyParams, query: &[u32], frames: &FrameSeq) -> Vec<f64> {
    let d = policy.dims.d;
    let mut c = vec![0.0; d];
    let toks = frames.tokens();
    let inv_t = 1.0 / toks.len() as f64;
    for (t, &v) in toks.iter().enumerate() {
        let e = policy.t.frame_embed.row(v as usize);
        let p = policy.t.pos_embed.row(t);
        for k in 0..d {
            c[k] += inv_t * e[k] * p[k];
        }
    }
    if !query.is_empty() {
        let inv_l = 1.0 / query.len() as f64;
        for &w in query {
            let x = policy.t.text_embed.row(w as usize);
            for k in 0..d {
                c[k] += inv_l * x[k];
            }
        }
    }
    c
}

struct Step {
    prev: u32,
    h_prev: Vec<f64>,
    h: Vec<f64>,
    /// Natural (temperature 1) log-probabilities over the text vocabulary.
    logp: Vec<f64>,
}

/// Incremental decoder state, so sampling and scoring share one code path.
struct Decoder<'a> {
    policy: &'a PolicyParams,
    c: Vec<f64>,
    /// `W_c·c + b_h`, constant across steps.
    base: Vec<f64>,
    h: Vec<f64>,
    prev: u32,
    mask: Option<&'a [u32]>,
}

impl<'a> Decoder<'a> {
    fn new(policy: &'a PolicyParams, query: &[u32], frames: &FrameSeq, mask: Option<&'a [u32]>) -> Self {
        let d = policy.dims.d;
        let c = context(policy, query, frames);
        let mut base = policy.t.b_h.data.clone();
        policy.t.w_c.matvec_acc(&c, &mut base);
        Self { policy, c, base, h: vec![0.0; d], prev: BOS, mask }
    }

    /// Advance one position; returns the logits and records the step.
    fn step(&mut self) -> (Vec<f64>, Step) {
        let p = self.policy;
        let mut a = self.base.clone();
        p.t.w_p.matvec_acc(p.t.text_embed.row(self.prev as usize), &mut a);
        p.t.w_h.matvec_acc(&self.h, &mut a);
        let h: Vec<f64> = a.iter().map(|x| x.tanh()).collect();
        let mut logits = p.t.b_o.data.clone();
        p.t.u.matvec_acc(&h, &mut logits);
        if let Some(allowed) = self.mask {
            let mut masked = vec![f64::NEG_INFINITY; logits.len()];
            for &t in allowed {
                masked[t as usize] = logits[t as usize];
            }
            logits = masked;
        }
        let logp = log_softmax(&logits);
        let step = Step {
            prev: self.prev,
            h_prev: std::mem::replace(&mut self.h, h.clone()),
            h,
            logp,
        };
        (logits, step)
    }

    fn feed(&mut self, token: u32) {
        self.prev = token;
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> u32 {
    if temperature == 0.0 {
        return argmax(logits) as u32;
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let probs = softmax(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    last as u32
}

/// Autoregressive sample; temperature 0 is greedy with ties to the lowest id.
/// Recorded log-probabilities are always under the temperature-1 distribution.
pub fn sample_response<R: Rng + ?Sized>(
    policy: &PolicyParams,
    query: &[u32],
    frames: &FrameSeq,
    mask: Option<&[u32]>,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Response {
    let mut dec = Decoder::new(policy, query, frames, mask);
    let mut tokens = Vec::with_capacity(max_len);
    let mut token_logprobs = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let (logits, step) = dec.step();
        let tok = draw(&logits, temperature, rng);
        tokens.push(tok);
        token_logprobs.push(step.logp[tok as usize]);
        if tok == EOS {
            break;
        }
        dec.feed(tok);
    }
    Response { tokens, token_logprobs, policy_tag: String::new() }
}

fn trace(
    policy: &PolicyParams,
    query: &[u32],
    frames: &FrameSeq,
    mask: Option<&[u32]>,
    tokens: &[u32],
) -> (Vec<f64>, Vec<Step>) {
    let mut dec = Decoder::new(policy, query, frames, mask);
    let mut steps = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let (_, step) = dec.step();
        steps.push(step);
        dec.feed(tok);
    }
    (dec.c, steps)
}

/// Per-token `log π(o_t | q, o_<t)`.
/// A token outside `mask` scores `-inf`.
pub fn response_logprobs(
    policy: &PolicyParams,
    query: &[u32],
    frames: &FrameSeq,
    mask: Option<&[u32]>,
    tokens: &[u32],
) -> Vec<f64> {
    let (_, steps) = trace(policy, query, frames, mask, tokens);
    steps.iter().zip(tokens).map(|(s, &t)| s.logp[t as usize]).collect()
}

/// Full next-token log-distribution at every position of `tokens`.
pub fn position_logprobs(
    policy: &PolicyParams,
    query: &[u32],
    frames: &FrameSeq,
    mask: Option<&[u32]>,
    tokens: &[u32],
) -> Vec<Vec<f64>> {
    let (_, steps) = trace(policy, query, frames, mask, tokens);
    steps.into_iter().map(|s| s.logp).collect()
}

/// Step-1 distribution over the full text vocabulary.
pub fn first_token_distribution(policy: &PolicyParams, query: &[u32], frames: &FrameSeq) -> Vec<f64> {
    let mut dec = Decoder::new(policy, query, frames, None);
    let (_, step) = dec.step();
    step.logp.into_iter().map(f64::exp).collect()
}

pub fn sequence_perplexity(
    policy: &PolicyParams,
    query: &[u32],
    frames: &FrameSeq,
    mask: Option<&[u32]>,
    target: &[u32],
) -> f64 {
    let lp = response_logprobs(policy, query, frames, mask, target);
    let mean = lp.iter().sum::<f64>() / lp.len().max(1) as f64;
    (-mean).exp()
}

/// Exact gradient of `Σ_t weights[t] · log π(o_t | q, o_<t)`, accumulated into `grad`.
/// Returns the weighted log-likelihood value.
pub fn accumulate_weighted_logprob_grad(
    policy: &PolicyParams,
    query: &[u32],
    frames: &FrameSeq,
    mask: Option<&[u32]>,
    tokens: &[u32],
    weights: &[f64],
    grad: &mut GradientAccumulator,
) -> Result<f64> {
    if weights.len() != tokens.len() {
        return Err(Error::Length { expected: tokens.len(), actual: weights.len() });
    }
    if let Some(allowed) = mask {
        if let Some(t) = tokens.iter().find(|t| !allowed.contains(t)) {
            return Err(Error::Unsupported(format!("token {t} lies outside the decoding mask")));
        }
    }
    let d = policy.dims.d;
    let (c, steps) = trace(policy, query, frames, mask, tokens);
    let value: f64 = steps
        .iter()
        .zip(tokens)
        .zip(weights)
        .map(|((s, &t), w)| w * s.logp[t as usize])
        .sum();
    if weights.iter().all(|w| *w == 0.0) {
        return Ok(value);
    }

    let g = &mut grad.t;
    let mut dh_next = vec![0.0; d];
    let mut dbase = vec![0.0; d];
    for (i, step) in steps.iter().enumerate().rev() {
        let w = weights[i];
        let tok = tokens[i] as usize;
        let mut dh = std::mem::take(&mut dh_next);
        if w != 0.0 {
            // d/dlogits of w·log softmax = w·(onehot − p)
            let mut dlogits: Vec<f64> = step.logp.iter().map(|lp| -w * lp.exp()).collect();
            dlogits[tok] += w;
            g.u.outer_acc(&dlogits, &step.h);
            for (b, x) in g.b_o.data.iter_mut().zip(&dlogits) {
                *b += x;
            }
            policy.t.u.matvec_t_acc(&dlogits, &mut dh);
        }
        let da: Vec<f64> = dh.iter().zip(&step.h).map(|(g, h)| g * (1.0 - h * h)).collect();
        g.w_h.outer_acc(&da, &step.h_prev);
        let x_prev = policy.t.text_embed.row(step.prev as usize);
        g.w_p.outer_acc(&da, x_prev);
        let mut dx = vec![0.0; d];
        policy.t.w_p.matvec_t_acc(&da, &mut dx);
        for (a, b) in g.text_embed.row_mut(step.prev as usize).iter_mut().zip(&dx) {
            *a += b;
        }
        let mut dh_prev = vec![0.0; d];
        policy.t.w_h.matvec_t_acc(&da, &mut dh_prev);
        dh_next = dh_prev;
        for (a, b) in dbase.iter_mut().zip(&da) {
            *a += b;
        }
    }

    for (b, x) in g.b_h.data.iter_mut().zip(&dbase) {
        *b += x;
    }
    g.w_c.outer_acc(&dbase, &c);
    let mut dc = vec![0.0; d];
    policy.t.w_c.matvec_t_acc(&dbase, &mut dc);

    let toks = frames.tokens();
    let inv_t = 1.0 / toks.len() as f64;
    for (t, &v) in toks.iter().enumerate() {
        let e = policy.t.frame_embed.row(v as usize).to_vec();
        let p = policy.t.pos_embed.row(t).to_vec();
        let ge = g.frame_embed.row_mut(v as usize);
        for k in 0..d {
            ge[k] += inv_t * dc[k] * p[k];
        }
        let gp = g.pos_embed.row_mut(t);
        for k in 0..d {
            gp[k] += inv_t * dc[k] * e[k];
        }
    }
    if !query.is_empty() {
        let inv_l = 1.0 / query.len() as f64;
        for &wtok in query {
            for (a, b) in g.text_embed.row_mut(wtok as usize).iter_mut().zip(&dc) {
                *a += inv_l * b;
            }
        }
    }
    Ok(value)
}

pub fn grad_weighted_logprob(
    policy: &PolicyParams,
    query: &[u32],
    frames: &FrameSeq,
    mask: Option<&[u32]>,
    tokens: &[u32],
    weights: &[f64],
) -> Result<GradientAccumulator> {
    let mut grad = GradientAccumulator::zeros(policy.dims);
    accumulate_weighted_logprob_grad(policy, query, frames, mask, tokens, weights, &mut grad)?;
    Ok(grad)
}

/// Decoder logits at step 1 (after BOS).
pub fn first_step_logits(policy: &PolicyParams, query: &[u32], frames: &FrameSeq) -> Vec<f64> {
    let c = context(policy, query, frames);
    let d = policy.dims.d;
    let x = policy.t.text_embed.row(BOS as usize);
    let h: Vec<f64> = (0..d)
        .map(|k| {
            let a = policy.t.b_h.data[k] + dot(policy.t.w_c.row(k), &c) + dot(policy.t.w_p.row(k), x);
            a.tanh()
        })
        .collect();
    (0..policy.dims.text_vocab)
        .map(|v| policy.t.b_o.data[v] + dot(policy.t.u.row(v), &h))
        .collect()
}
