//! JSON checkpoint of the toy policy.
//!
//! ```json
//! {"format": "arrowrl.toy_policy", "version": 1,
//!  "dims": {"frame_vocab": 40, "text_vocab": 52, "max_frames": 16, "d": 32},
//!  "text_vocab": ["<bos>", "<eos>", "<unk>", "..."],
//!  "tensors": [{"name": "frame_embed", "shape": [40, 32], "data": [...]}, ...]}
//! ```
//!
//! Tensors are row-major and appear in the order of [`TENSOR_NAMES`]. Floats are
//! written in shortest round-trip form, so save/load is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{PolicyDims, PolicyParams, Tensor, TENSOR_NAMES};
use crate::domain::Vocab;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "arrowrl.toy_policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    format: String,
    version: u32,
    dims: PolicyDims,
    text_vocab: Vec<String>,
    tensors: Vec<NamedTensor>,
}

impl PolicyCheckpoint {
    pub fn new(params: &PolicyParams, vocab: &Vocab) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: params.dims,
            text_vocab: vocab.words().to_vec(),
            tensors: params
                .t
                .iter()
                .map(|(name, t)| NamedTensor { name: name.into(), shape: t.shape.clone(), data: t.data.clone() })
                .collect(),
        }
    }

    pub fn into_parts(self) -> Result<(PolicyParams, Vocab)> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        if self.format != CHECKPOINT_FORMAT {
            return bad(format!("unknown format {:?}", self.format));
        }
        if self.version != CHECKPOINT_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.text_vocab.len() != self.dims.text_vocab {
            return bad("vocabulary length disagrees with dims".into());
        }
        let mut params = PolicyParams::zeros(self.dims);
        if self.tensors.len() != TENSOR_NAMES.len() {
            return bad(format!("expected {} tensors, found {}", TENSOR_NAMES.len(), self.tensors.len()));
        }
        for ((name, slot), nt) in params.t.iter_mut().zip(self.tensors) {
            if nt.name != name {
                return bad(format!("expected tensor {name}, found {}", nt.name));
            }
            if nt.shape != slot.shape || nt.data.len() != slot.data.len() {
                return bad(format!("tensor {name} has shape {:?}, expected {:?}", nt.shape, slot.shape));
            }
            *slot = Tensor { shape: nt.shape, data: nt.data };
        }
        if !params.all_finite() {
            return bad("non-finite parameter values".into());
        }
        Ok((params, Vocab::from_ordered(self.text_vocab)))
    }
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other("path has no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_policy(path: &Path, params: &PolicyParams, vocab: &Vocab) -> Result<()> {
    let bytes = serde_json::to_vec(&PolicyCheckpoint::new(params, vocab))?;
    write_atomic(path, &bytes)
}

pub fn load_policy(path: &Path) -> Result<(PolicyParams, Vocab)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let ck: PolicyCheckpoint =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ck.into_parts()
}
