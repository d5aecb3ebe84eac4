//! The trainable core: patch embedding with positional encodings, a small
//! pre-normalization transformer encoder with feature taps at pyramid levels,
//! shared-weight dual forward passes, a single linear output projection, and
//! exact reverse-mode gradients for every parameter.
//!
//! All math is generic over [`Scalar`]; `f64` is the default (and the
//! precision at which finite-difference checks are meaningful), `f32` trades
//! accuracy for speed.

mod backward;
mod checkpoint;
mod forward;
mod params;

pub use backward::{backward_dual, backward_masked_only, volume_grad_to_tokens};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    encoder_forward, forward_branch, forward_dual, forward_full, forward_masked,
    masked_patch_matrix, patch_matrix, tokens_to_volume, BlockCache, BranchCache, DualOutput,
    LnCache,
};
pub use params::{Block, LayerNorm, Linear, ModelParams, TensorMut, TensorRef};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Floating-point type the model computes in.
pub trait Scalar:
    ndarray::NdFloat + ndarray::LinalgScalar + Send + Sync + 'static
{
    const PRECISION: Precision;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn name(&self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Architecture and shape of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_modalities: usize,
    /// Input volume extents `(H, W, D)`.
    pub dims: (usize, usize, usize),
    pub patch_size: (usize, usize, usize),
    /// Number of transformer blocks.
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Number of pyramid levels `L`; features are tapped after blocks
    /// `depth/L · l` for `l = 1..L`.
    pub pyramid_levels: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // embed_dim matches the default patch count n = 64: the uniformity
        // loss drives n position codes toward mutual orthogonality, which is
        // only attainable for d ≥ n. Smaller widths leave it frustrated at
        // the Welch bound and its residual gradient drowns the
        // reconstruction signal.
        Self {
            num_modalities: 4,
            dims: (16, 16, 16),
            patch_size: (4, 4, 4),
            depth: 4,
            embed_dim: 64,
            num_heads: 4,
            pyramid_levels: 4,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w, d) = self.dims;
        let (ph, pw, pd) = self.patch_size;
        for (axis, extent, patch) in [('H', h, ph), ('W', w, pw), ('D', d, pd)] {
            if patch == 0 || extent == 0 || extent % patch != 0 {
                return Err(Error::NonDivisible {
                    axis,
                    extent,
                    patch,
                });
            }
        }
        if self.num_modalities == 0 {
            return Err(Error::Config("num_modalities must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid_levels must be >= 1".into()));
        }
        if self.depth % self.pyramid_levels != 0 {
            return Err(Error::Config(format!(
                "depth {} must be divisible by pyramid_levels {}",
                self.depth, self.pyramid_levels
            )));
        }
        Ok(())
    }

    /// Number of patch positions `n`.
    pub fn num_positions(&self) -> usize {
        let (h, w, d) = self.dims;
        let (ph, pw, pd) = self.patch_size;
        (h / ph) * (w / pw) * (d / pd)
    }

    /// Flattened patch length `P = C · ph · pw · pd`.
    pub fn patch_len(&self) -> usize {
        let (ph, pw, pd) = self.patch_size;
        self.num_modalities * ph * pw * pd
    }

    /// Hidden width of the per-block MLP.
    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Block indices (1-based) after which features are tapped. With
    /// `depth == 0` the single tap is the embedding itself (layer 0).
    pub fn tap_layers(&self) -> Vec<usize> {
        (1..=self.pyramid_levels)
            .map(|l| self.depth / self.pyramid_levels * l)
            .collect()
    }
}

/// Which branch a feature matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    FullInput,
    MaskedInput,
}

/// An `n × d` matrix of patch embeddings tapped at one encoder level.
#[derive(Debug, Clone)]
pub struct LatentFeatures {
    /// Pyramid level, `1..=L` (0 for the embedding itself when `depth == 0`).
    pub level: usize,
    pub matrix: Array2<f64>,
    pub source: FeatureSource,
}
