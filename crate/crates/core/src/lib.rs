//! Reverse-aware GRPO post-training, temporal divergence analysis and
//! benchmark curation, run end to end on a small recurrent toy policy over
//! synthetic frame-token clips.

pub mod bridge;
pub mod domain;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod judge;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod run;
pub mod synthworld;
pub mod tds;

pub use error::{Error, Result};
