use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-scale..=scale)).collect(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// `out += self · x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        let c = self.cols();
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(c)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · g`
    pub fn matvec_t_acc(&self, g: &[f64], out: &mut [f64]) {
        let c = self.cols();
        for (gi, row) in g.iter().zip(self.data.chunks_exact(c)) {
            if *gi != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += gi * w;
                }
            }
        }
    }

    /// `self += g ⊗ x`
    pub fn outer_acc(&mut self, g: &[f64], x: &[f64]) {
        let c = self.cols();
        for (gi, row) in g.iter().zip(self.data.chunks_exact_mut(c)) {
            if *gi != 0.0 {
                for (w, xj) in row.iter_mut().zip(x) {
                    *w += gi * xj;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    /// Frame vocabulary size, SEP included.
    pub frame_vocab: usize,
    pub text_vocab: usize,
    pub max_frames: usize,
    pub d: usize,
}

pub const TENSOR_NAMES: [&str; 9] = [
    "frame_embed",
    "pos_embed",
    "text_embed",
    "w_c",
    "w_p",
    "w_h",
    "b_h",
    "u",
    "b_o",
];

/// The nine parameter tensors of the toy policy, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    pub frame_embed: Tensor,
    pub pos_embed: Tensor,
    pub text_embed: Tensor,
    pub w_c: Tensor,
    pub w_p: Tensor,
    pub w_h: Tensor,
    pub b_h: Tensor,
    pub u: Tensor,
    pub b_o: Tensor,
}

impl Tensors {
    pub fn zeros(dims: &PolicyDims) -> Self {
        let d = dims.d;
        Self {
            frame_embed: Tensor::zeros(&[dims.frame_vocab, d]),
            pos_embed: Tensor::zeros(&[dims.max_frames, d]),
            text_embed: Tensor::zeros(&[dims.text_vocab, d]),
            w_c: Tensor::zeros(&[d, d]),
            w_p: Tensor::zeros(&[d, d]),
            w_h: Tensor::zeros(&[d, d]),
            b_h: Tensor::zeros(&[d]),
            u: Tensor::zeros(&[dims.text_vocab, d]),
            b_o: Tensor::zeros(&[dims.text_vocab]),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        TENSOR_NAMES.into_iter().zip([
            &self.frame_embed,
            &self.pos_embed,
            &self.text_embed,
            &self.w_c,
            &self.w_p,
            &self.w_h,
            &self.b_h,
            &self.u,
            &self.b_o,
        ])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Tensor)> {
        TENSOR_NAMES.into_iter().zip([
            &mut self.frame_embed,
            &mut self.pos_embed,
            &mut self.text_embed,
            &mut self.w_c,
            &mut self.w_p,
            &mut self.w_h,
            &mut self.b_h,
            &mut self.u,
            &mut self.b_o,
        ])
    }

    pub fn num_values(&self) -> usize {
        self.iter().map(|(_, t)| t.data.len()).sum()
    }

    fn same_shapes(&self, other: &Tensors) -> bool {
        self.iter().zip(other.iter()).all(|((_, a), (_, b))| a.shape == b.shape)
    }
}

/// Half-widths of the uniform init. Embeddings start near unit scale so the
/// frame-by-position products carry signal from the first step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScale {
    pub embed: f64,
    /// Weight matrices and biases.
    pub dense: f64,
}

impl Default for InitScale {
    fn default() -> Self {
        Self { embed: 1.0, dense: 0.1 }
    }
}

/// All learnable parameters of the toy policy. Clones are deep, so a clone
/// serves as an independent snapshot (reference or rollout policy).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub t: Tensors,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        Self { dims, t: Tensors::zeros(&dims) }
    }

    /// Uniform init with the default scales, drawn tensor by tensor in declaration order.
    pub fn init<R: Rng + ?Sized>(dims: PolicyDims, rng: &mut R) -> Self {
        Self::init_with(dims, InitScale::default(), rng)
    }

    pub fn init_with<R: Rng + ?Sized>(dims: PolicyDims, scale: InitScale, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims);
        for (name, t) in p.t.iter_mut() {
            let s = if name.ends_with("_embed") { scale.embed } else { scale.dense };
            *t = Tensor::uniform(&t.shape.clone(), s, rng);
        }
        p
    }

    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    /// Gradient ascent step `θ ← θ + lr·g`.
    pub fn apply_update(&mut self, grad: &GradientAccumulator, learning_rate: f64) -> Result<()> {
        if self.dims != grad.dims || !self.t.same_shapes(&grad.t) {
            return Err(Error::Shape("gradient does not match parameter shapes".into()));
        }
        for ((_, p), (_, g)) in self.t.iter_mut().zip(grad.t.iter()) {
            for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                *pv += learning_rate * gv;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.t.iter().all(|(_, t)| t.all_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.t.iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }
}

/// Gradient buffers congruent with [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator {
    pub dims: PolicyDims,
    pub t: Tensors,
}

impl GradientAccumulator {
    pub fn zeros(dims: PolicyDims) -> Self {
        Self { dims, t: Tensors::zeros(&dims) }
    }

    pub fn add_assign(&mut self, other: &GradientAccumulator) -> Result<()> {
        self.add_scaled(other, 1.0)
    }

    pub fn add_scaled(&mut self, other: &GradientAccumulator, scale: f64) -> Result<()> {
        if self.dims != other.dims || !self.t.same_shapes(&other.t) {
            return Err(Error::Shape("gradient buffers differ in shape".into()));
        }
        for ((_, a), (_, b)) in self.t.iter_mut().zip(other.t.iter()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.t.iter_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.t
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.t.iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.t.iter().all(|(_, t)| t.data.iter().all(|v| *v == 0.0))
    }
}
