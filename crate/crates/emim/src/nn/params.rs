//! Parameter containers and elementwise traversal.
//!
//! There is exactly one parameter store per model; both forward branches
//! read it, so gradient contributions from the two branches sum into one
//! gradient structure of the same shape. Traversal via [`ModelParams::named`]
//! gives every tensor a stable name, used by the checkpoint format, the
//! optimizer, and finite-difference sweeps.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{EncoderConfig, Scalar};
use crate::rng::derive_rng;

/// Init scale for weights, positional embeddings, and the mask token.
const INIT_STD: f64 = 0.02;
/// The output projection's bias starts mid-intensity so early
/// reconstructions sit inside the data range.
const OUTPUT_BIAS_INIT: f64 = 0.5;

/// A dense affine map `y = x Wᵀ + b` with `W: out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Linear<S> {
    fn init(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> Self {
        let mut weight = Array2::zeros((out_dim, in_dim));
        for w in weight.iter_mut() {
            *w = S::from_f64(INIT_STD * rng.sample::<f64, _>(StandardNormal));
        }
        Self {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Applies the map to rows of `x` (`rows × in` → `rows × out`).
    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
}

impl<S: Scalar> LayerNorm<S> {
    fn init(dim: usize) -> Self {
        Self {
            gamma: Array1::from_elem(dim, S::one()),
            beta: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }
}

/// One pre-normalization transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub ln1: LayerNorm<S>,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub w1: Linear<S>,
    pub w2: Linear<S>,
}

impl<S: Scalar> Block<S> {
    fn init(rng: &mut impl Rng, dim: usize, mlp_dim: usize) -> Self {
        Self {
            ln1: LayerNorm::init(dim),
            wq: Linear::init(rng, dim, dim),
            wk: Linear::init(rng, dim, dim),
            wv: Linear::init(rng, dim, dim),
            wo: Linear::init(rng, dim, dim),
            ln2: LayerNorm::init(dim),
            w1: Linear::init(rng, mlp_dim, dim),
            w2: Linear::init(rng, dim, mlp_dim),
        }
    }

    fn zeros(dim: usize, mlp_dim: usize) -> Self {
        Self {
            ln1: LayerNorm::zeros(dim),
            wq: Linear::zeros(dim, dim),
            wk: Linear::zeros(dim, dim),
            wv: Linear::zeros(dim, dim),
            wo: Linear::zeros(dim, dim),
            ln2: LayerNorm::zeros(dim),
            w1: Linear::zeros(mlp_dim, dim),
            w2: Linear::zeros(dim, mlp_dim),
        }
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    /// Patch embedding, `P → d`.
    pub embed: Linear<S>,
    /// Learned absolute positional embeddings, `n × d`; shared by both
    /// branches.
    pub pos: Array2<S>,
    /// Learned patch-space mask token, length `P`. Masked `(modality,
    /// position)` cells take the token's modality segment before embedding.
    pub mask_token: Array1<S>,
    pub blocks: Vec<Block<S>>,
    /// Output projection `g`, `d → P`; a pure linear map.
    pub output: Linear<S>,
}

/// Borrowed view of one named tensor.
pub enum TensorRef<'a, S> {
    V(&'a Array1<S>),
    M(&'a Array2<S>),
}

impl<S: Scalar> TensorRef<'_, S> {
    pub fn len(&self) -> usize {
        match self {
            TensorRef::V(a) => a.len(),
            TensorRef::M(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[S] {
        match self {
            TensorRef::V(a) => a.as_slice().expect("standard layout"),
            TensorRef::M(a) => a.as_slice().expect("standard layout"),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::V(a) => vec![a.len()],
            TensorRef::M(a) => a.shape().to_vec(),
        }
    }
}

/// Mutable view of one named tensor.
pub enum TensorMut<'a, S> {
    V(&'a mut Array1<S>),
    M(&'a mut Array2<S>),
}

impl<S: Scalar> TensorMut<'_, S> {
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        match self {
            TensorMut::V(a) => a.as_slice_mut().expect("standard layout"),
            TensorMut::M(a) => a.as_slice_mut().expect("standard layout"),
        }
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: &EncoderConfig) -> crate::error::Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, 0xd0de);
        let d = config.embed_dim;
        let p = config.patch_len();
        let n = config.num_positions();

        let embed = Linear::init(&mut rng, d, p);
        let mut pos = Array2::zeros((n, d));
        for v in pos.iter_mut() {
            *v = S::from_f64(INIT_STD * rng.sample::<f64, _>(StandardNormal));
        }
        let mut mask_token = Array1::zeros(p);
        for v in mask_token.iter_mut() {
            *v = S::from_f64(INIT_STD * rng.sample::<f64, _>(StandardNormal));
        }
        let blocks = (0..config.depth)
            .map(|_| Block::init(&mut rng, d, config.mlp_dim()))
            .collect();
        let mut output = Linear::init(&mut rng, p, d);
        output.bias.fill(S::from_f64(OUTPUT_BIAS_INIT));
        Ok(Self {
            embed,
            pos,
            mask_token,
            blocks,
            output,
        })
    }

    /// Same shapes, all zero; the gradient/optimizer-state container.
    pub fn zeros_like(&self) -> Self {
        let d = self.pos.dim().1;
        let mlp_dim = self.blocks.first().map_or(0, |b| b.w1.weight.dim().0);
        Self {
            embed: Linear::zeros(self.embed.weight.dim().0, self.embed.weight.dim().1),
            pos: Array2::zeros(self.pos.dim()),
            mask_token: Array1::zeros(self.mask_token.len()),
            blocks: self.blocks.iter().map(|_| Block::zeros(d, mlp_dim)).collect(),
            output: Linear::zeros(self.output.weight.dim().0, self.output.weight.dim().1),
        }
    }

    /// Stable `(name, tensor)` listing; the canonical traversal order.
    pub fn named(&self) -> Vec<(String, TensorRef<'_, S>)> {
        let mut out: Vec<(String, TensorRef<'_, S>)> = vec![
            ("embed.w".into(), TensorRef::M(&self.embed.weight)),
            ("embed.b".into(), TensorRef::V(&self.embed.bias)),
            ("pos".into(), TensorRef::M(&self.pos)),
            ("mask_token".into(), TensorRef::V(&self.mask_token)),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.gamma"), TensorRef::V(&b.ln1.gamma)));
            out.push((format!("block{i}.ln1.beta"), TensorRef::V(&b.ln1.beta)));
            for (name, lin) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                out.push((format!("block{i}.{name}.w"), TensorRef::M(&lin.weight)));
                out.push((format!("block{i}.{name}.b"), TensorRef::V(&lin.bias)));
            }
            out.push((format!("block{i}.ln2.gamma"), TensorRef::V(&b.ln2.gamma)));
            out.push((format!("block{i}.ln2.beta"), TensorRef::V(&b.ln2.beta)));
            for (name, lin) in [("w1", &b.w1), ("w2", &b.w2)] {
                out.push((format!("block{i}.{name}.w"), TensorRef::M(&lin.weight)));
                out.push((format!("block{i}.{name}.b"), TensorRef::V(&lin.bias)));
            }
        }
        out.push(("output.w".into(), TensorRef::M(&self.output.weight)));
        out.push(("output.b".into(), TensorRef::V(&self.output.bias)));
        out
    }

    /// Mutable counterpart of [`ModelParams::named`], in the same order.
    pub fn named_mut(&mut self) -> Vec<(String, TensorMut<'_, S>)> {
        let mut out: Vec<(String, TensorMut<'_, S>)> = vec![
            ("embed.w".into(), TensorMut::M(&mut self.embed.weight)),
            ("embed.b".into(), TensorMut::V(&mut self.embed.bias)),
            ("pos".into(), TensorMut::M(&mut self.pos)),
            ("mask_token".into(), TensorMut::V(&mut self.mask_token)),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.ln1.gamma"), TensorMut::V(&mut b.ln1.gamma)));
            out.push((format!("block{i}.ln1.beta"), TensorMut::V(&mut b.ln1.beta)));
            for (name, lin) in [
                ("wq", &mut b.wq),
                ("wk", &mut b.wk),
                ("wv", &mut b.wv),
                ("wo", &mut b.wo),
            ] {
                out.push((format!("block{i}.{name}.w"), TensorMut::M(&mut lin.weight)));
                out.push((format!("block{i}.{name}.b"), TensorMut::V(&mut lin.bias)));
            }
            out.push((format!("block{i}.ln2.gamma"), TensorMut::V(&mut b.ln2.gamma)));
            out.push((format!("block{i}.ln2.beta"), TensorMut::V(&mut b.ln2.beta)));
            for (name, lin) in [("w1", &mut b.w1), ("w2", &mut b.w2)] {
                out.push((format!("block{i}.{name}.w"), TensorMut::M(&mut lin.weight)));
                out.push((format!("block{i}.{name}.b"), TensorMut::V(&mut lin.bias)));
            }
        }
        out.push(("output.w".into(), TensorMut::M(&mut self.output.weight)));
        out.push(("output.b".into(), TensorMut::V(&mut self.output.bias)));
        out
    }

    /// `self += factor · other`, elementwise over all tensors.
    pub fn add_scaled(&mut self, other: &Self, factor: S) {
        let mut mine = self.named_mut();
        let theirs = other.named();
        for ((_, a), (_, b)) in mine.iter_mut().zip(theirs.iter()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x = *x + factor * *y;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for (_, mut t) in self.named_mut() {
            for x in t.as_mut_slice() {
                *x = *x * factor;
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Largest absolute entry over all tensors; cheap sanity probe.
    pub fn max_abs(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.as_slice().iter().map(|v| v.as_f64().abs()))
            .fold(0.0, f64::max)
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        self.convert::<f64>()
    }

    pub fn convert<T: Scalar>(&self) -> ModelParams<T> {
        let conv1 = |a: &Array1<S>| a.mapv(|v| T::from_f64(v.as_f64()));
        let conv2 = |a: &Array2<S>| a.mapv(|v| T::from_f64(v.as_f64()));
        ModelParams {
            embed: Linear {
                weight: conv2(&self.embed.weight),
                bias: conv1(&self.embed.bias),
            },
            pos: conv2(&self.pos),
            mask_token: conv1(&self.mask_token),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: LayerNorm {
                        gamma: conv1(&b.ln1.gamma),
                        beta: conv1(&b.ln1.beta),
                    },
                    wq: Linear {
                        weight: conv2(&b.wq.weight),
                        bias: conv1(&b.wq.bias),
                    },
                    wk: Linear {
                        weight: conv2(&b.wk.weight),
                        bias: conv1(&b.wk.bias),
                    },
                    wv: Linear {
                        weight: conv2(&b.wv.weight),
                        bias: conv1(&b.wv.bias),
                    },
                    wo: Linear {
                        weight: conv2(&b.wo.weight),
                        bias: conv1(&b.wo.bias),
                    },
                    ln2: LayerNorm {
                        gamma: conv1(&b.ln2.gamma),
                        beta: conv1(&b.ln2.beta),
                    },
                    w1: Linear {
                        weight: conv2(&b.w1.weight),
                        bias: conv1(&b.w1.bias),
                    },
                    w2: Linear {
                        weight: conv2(&b.w2.weight),
                        bias: conv1(&b.w2.bias),
                    },
                })
                .collect(),
            output: Linear {
                weight: conv2(&self.output.weight),
                bias: conv1(&self.output.bias),
            },
        }
    }
}
