//! The toy autoregressive policy: an order-sensitive frame encoder feeding a
//! tanh recurrent decoder over a word vocabulary. This is a stand-in for a
//! large multimodal model, small enough for exact gradients.

mod checkpoint;
mod model;
mod params;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_policy, save_policy, write_atomic, PolicyCheckpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use model::{
    accumulate_weighted_logprob_grad, argmax, context, first_step_logits, first_token_distribution,
    grad_weighted_logprob, log_softmax, position_logprobs, response_logprobs, sample_response,
    sequence_perplexity, softmax,
};
pub use params::{GradientAccumulator, InitScale, PolicyDims, PolicyParams, Tensor, Tensors, TENSOR_NAMES};

use crate::domain::{EncodedSample, FrameSeq, Response};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// A probability vector over K options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Length { expected: 1, actual: 0 });
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Shape("probabilities must be finite and non-negative".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Shape(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self(probs))
    }

    /// Normalize non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Shape("weights have no positive mass".into()));
        }
        Self::new(weights.iter().map(|w| w / s).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Step-1 probabilities of the K option-leading tokens, renormalized to sum 1.
pub fn first_token_option_probs(policy: &PolicyParams, enc: &EncodedSample, frames: &FrameSeq) -> Result<ProbVector> {
    let tokens = enc
        .option_tokens
        .as_ref()
        .ok_or_else(|| Error::Unsupported(format!("sample {} has no options", enc.id())))?;
    let mut seen = HashSet::new();
    for t in tokens {
        if !seen.insert(*t) {
            return Err(Error::DuplicateOptionToken(t.to_string()));
        }
    }
    let logits = first_step_logits(policy, &enc.query, frames);
    // restricting a softmax and renormalizing equals a softmax over the restricted logits
    let restricted: Vec<f64> = tokens.iter().map(|&t| logits[t as usize]).collect();
    ProbVector::new(softmax(&restricted))
}

/// Anything that can produce rollouts and option probabilities for a sample.
/// Implemented in-process by [`ToyPolicy`] and out-of-process by the bridge client.
pub trait RolloutPolicy: Sync {
    fn tag(&self) -> &str;

    /// `seed` fully determines the sampling randomness.
    fn sample(
        &self,
        enc: &EncodedSample,
        frames: &FrameSeq,
        temperature: f64,
        max_len: usize,
        seed: u64,
    ) -> Result<Response>;

    fn logprobs(&self, enc: &EncodedSample, frames: &FrameSeq, tokens: &[u32]) -> Result<Vec<f64>>;

    fn option_probs(&self, enc: &EncodedSample, frames: &FrameSeq) -> Result<ProbVector>;
}

/// In-process toy policy bound to a tag.
#[derive(Debug, Clone)]
pub struct ToyPolicy<'a> {
    pub params: &'a PolicyParams,
    pub tag: String,
}

impl<'a> ToyPolicy<'a> {
    pub fn new(params: &'a PolicyParams, tag: impl Into<String>) -> Self {
        Self { params, tag: tag.into() }
    }
}

/// Name of the substream used by [`RolloutPolicy::sample`] for a given seed.
pub const SAMPLE_STREAM: &str = "sample";

impl RolloutPolicy for ToyPolicy<'_> {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn sample(
        &self,
        enc: &EncodedSample,
        frames: &FrameSeq,
        temperature: f64,
        max_len: usize,
        seed: u64,
    ) -> Result<Response> {
        check_frames(self.params, frames)?;
        let mut rng = stream_rng(seed, SAMPLE_STREAM, 0);
        let mut r = sample_response(self.params, &enc.query, frames, enc.decode_mask(), temperature, enc.response_cap(max_len), &mut rng);
        r.policy_tag = self.tag.clone();
        Ok(r)
    }

    fn logprobs(&self, enc: &EncodedSample, frames: &FrameSeq, tokens: &[u32]) -> Result<Vec<f64>> {
        check_frames(self.params, frames)?;
        Ok(response_logprobs(self.params, &enc.query, frames, enc.decode_mask(), tokens))
    }

    fn option_probs(&self, enc: &EncodedSample, frames: &FrameSeq) -> Result<ProbVector> {
        check_frames(self.params, frames)?;
        first_token_option_probs(self.params, enc, frames)
    }
}

pub fn check_frames(policy: &PolicyParams, frames: &FrameSeq) -> Result<()> {
    if frames.len() > policy.dims.max_frames {
        return Err(Error::Frames(format!(
            "{} frames exceed the policy's {} positions",
            frames.len(),
            policy.dims.max_frames
        )));
    }
    if let Some(t) = frames.tokens().iter().find(|&&t| t as usize >= policy.dims.frame_vocab) {
        return Err(Error::Frames(format!("frame token {t} outside vocabulary")));
    }
    Ok(())
}
