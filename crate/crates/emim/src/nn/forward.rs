//! Forward passes with cached intermediates.
//!
//! Both branches run the same parameter store. The full branch embeds the
//! raw patches; the masked branch first swaps every masked `(modality,
//! position)` segment of the flattened patch for the corresponding segment
//! of the learned mask token, so the sequence keeps all `n` rows and the
//! two branches stay row-aligned at every level.

use ndarray::{s, Array1, Array2, Array4, Axis};

use super::params::{Block, ModelParams};
use super::{EncoderConfig, FeatureSource, LatentFeatures, Scalar};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::volume::PatchGrid;

pub(crate) const LN_EPS: f64 = 1e-6;
const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_B: f64 = 0.044_715;

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let a = S::from_f64(GELU_A);
    let b = S::from_f64(GELU_B);
    let t = (a * (x + b * x * x * x)).tanh();
    half * x * (S::one() + t)
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let a = S::from_f64(GELU_A);
    let b = S::from_f64(GELU_B);
    let three = S::from_f64(3.0);
    let t = (a * (x + b * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * a * (S::one() + three * b * x * x)
}

/// Flattens the grid into an `n × P` matrix; per position, modality blocks
/// concatenate in modality order, each `(x, y, z)` row-major.
pub fn patch_matrix<S: Scalar>(grid: &PatchGrid) -> Array2<S> {
    let n = grid.num_positions();
    let c_count = grid.num_modalities();
    let block_len = grid.block_len();
    let mut out = Array2::zeros((n, c_count * block_len));
    for pos in 0..n {
        for c in 0..c_count {
            let block = grid.block(pos, c);
            let flat = block.as_slice().expect("blocks are standard layout");
            for (j, &v) in flat.iter().enumerate() {
                out[(pos, c * block_len + j)] = S::from_f64(v as f64);
            }
        }
    }
    out
}

/// [`patch_matrix`] with masked segments replaced by the mask token's
/// matching modality segment.
pub fn masked_patch_matrix<S: Scalar>(
    grid: &PatchGrid,
    mask: &BinaryMask,
    mask_token: &Array1<S>,
) -> Result<Array2<S>> {
    if grid.num_modalities() != mask.num_modalities()
        || grid.num_positions() != mask.num_positions()
    {
        return Err(Error::ShapeMismatch(format!(
            "grid is {}x{}, mask is {}x{}",
            grid.num_modalities(),
            grid.num_positions(),
            mask.num_modalities(),
            mask.num_positions()
        )));
    }
    let block_len = grid.block_len();
    let mut x = patch_matrix::<S>(grid);
    for (c, i) in mask.iter_masked() {
        let seg = c * block_len..(c + 1) * block_len;
        x.slice_mut(s![i, seg.clone()])
            .assign(&mask_token.slice(s![seg]));
    }
    Ok(x)
}

/// Per-row layer normalization cache.
#[derive(Debug, Clone)]
pub struct LnCache<S> {
    pub x_hat: Array2<S>,
    pub inv_std: Array1<S>,
}

pub(crate) fn layer_norm<S: Scalar>(
    x: &Array2<S>,
    gamma: &Array1<S>,
    beta: &Array1<S>,
) -> (Array2<S>, LnCache<S>) {
    let (rows, cols) = x.dim();
    let mut x_hat = Array2::zeros((rows, cols));
    let mut inv_std = Array1::zeros(rows);
    let eps = S::from_f64(LN_EPS);
    let inv_cols = S::from_f64(1.0 / cols as f64);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() * inv_cols;
        let mut var = S::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_cols;
        let is = S::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            x_hat[(r, c)] = (x[(r, c)] - mean) * is;
        }
    }
    let out = &x_hat * &gamma.view().insert_axis(Axis(0)) + &beta.view().insert_axis(Axis(0));
    (out, LnCache { x_hat, inv_std })
}

/// Everything one block's backward pass needs.
#[derive(Debug, Clone)]
pub struct BlockCache<S> {
    pub x_in: Array2<S>,
    pub ln1: LnCache<S>,
    pub ln1_out: Array2<S>,
    pub q: Array2<S>,
    pub k: Array2<S>,
    pub v: Array2<S>,
    /// Softmax attention per head, each `n × n` with rows summing to 1.
    pub attn: Vec<Array2<S>>,
    /// Attention output before the `wo` projection.
    pub concat: Array2<S>,
    pub h_mid: Array2<S>,
    pub ln2: LnCache<S>,
    pub ln2_out: Array2<S>,
    pub mlp_pre: Array2<S>,
    pub mlp_act: Array2<S>,
    pub out: Array2<S>,
}

fn block_forward<S: Scalar>(params: &Block<S>, x: &Array2<S>, num_heads: usize) -> BlockCache<S> {
    let (n, d) = x.dim();
    let head_dim = d / num_heads;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());

    let (ln1_out, ln1) = layer_norm(x, &params.ln1.gamma, &params.ln1.beta);
    let q = params.wq.forward(&ln1_out);
    let k = params.wk.forward(&ln1_out);
    let v = params.wv.forward(&ln1_out);

    let mut attn = Vec::with_capacity(num_heads);
    let mut concat = Array2::zeros((n, d));
    for h in 0..num_heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|v| v * scale);
        // Row-wise softmax, stabilized by the row max.
        for mut row in scores.rows_mut() {
            let max = row.iter().cloned().fold(S::from_f64(f64::NEG_INFINITY), S::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        concat.slice_mut(s![.., cols]).assign(&scores.dot(&vh));
        attn.push(scores);
    }
    let h_mid = x + &params.wo.forward(&concat);

    let (ln2_out, ln2) = layer_norm(&h_mid, &params.ln2.gamma, &params.ln2.beta);
    let mlp_pre = params.w1.forward(&ln2_out);
    let mlp_act = mlp_pre.mapv(gelu);
    let out = &h_mid + &params.w2.forward(&mlp_act);

    BlockCache {
        x_in: x.clone(),
        ln1,
        ln1_out,
        q,
        k,
        v,
        attn,
        concat,
        h_mid,
        ln2,
        ln2_out,
        mlp_pre,
        mlp_act,
        out,
    }
}

/// One branch's cached forward pass through embedding and all blocks.
#[derive(Debug, Clone)]
pub struct BranchCache<S> {
    /// The `n × P` matrix fed to the embedding (mask-mixed for the masked
    /// branch).
    pub patches: Array2<S>,
    pub tokens0: Array2<S>,
    pub blocks: Vec<BlockCache<S>>,
    pub source: FeatureSource,
}

impl<S: Scalar> BranchCache<S> {
    /// Token matrix after block `layer` (0 = the embedding).
    pub fn tokens_at(&self, layer: usize) -> &Array2<S> {
        if layer == 0 {
            &self.tokens0
        } else {
            &self.blocks[layer - 1].out
        }
    }

    /// Final token matrix.
    pub fn final_tokens(&self) -> &Array2<S> {
        self.tokens_at(self.blocks.len())
    }

    /// Features at every tap layer of `config`, in level order.
    pub fn tap_features(&self, config: &EncoderConfig) -> Vec<LatentFeatures> {
        config
            .tap_layers()
            .iter()
            .enumerate()
            .map(|(idx, &layer)| LatentFeatures {
                level: if config.depth == 0 { 0 } else { idx + 1 },
                matrix: self.tokens_at(layer).mapv(|v| v.as_f64()),
                source: self.source,
            })
            .collect()
    }
}

/// Runs the encoder over pre-embedded tokens, reporting a non-finite
/// activation with the offending block named.
pub fn encoder_forward<S: Scalar>(
    params: &ModelParams<S>,
    tokens0: Array2<S>,
    num_heads: usize,
    source: FeatureSource,
    patches: Array2<S>,
) -> Result<BranchCache<S>> {
    let mut blocks = Vec::with_capacity(params.blocks.len());
    let mut current = tokens0.clone();
    for (i, block) in params.blocks.iter().enumerate() {
        let cache = block_forward(block, &current, num_heads);
        if cache.out.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::NonFinite(format!("block {i} output")));
        }
        current = cache.out.clone();
        blocks.push(cache);
    }
    Ok(BranchCache {
        patches,
        tokens0,
        blocks,
        source,
    })
}

/// Embeds `patches` (adding positions) and runs the encoder.
pub fn forward_branch<S: Scalar>(
    params: &ModelParams<S>,
    config: &EncoderConfig,
    patches: Array2<S>,
    source: FeatureSource,
) -> Result<BranchCache<S>> {
    let tokens0 = params.embed.forward(&patches) + &params.pos;
    encoder_forward(params, tokens0, config.num_heads, source, patches)
}

/// Full-input branch only.
pub fn forward_full<S: Scalar>(
    params: &ModelParams<S>,
    config: &EncoderConfig,
    grid: &PatchGrid,
) -> Result<BranchCache<S>> {
    forward_branch(params, config, patch_matrix(grid), FeatureSource::FullInput)
}

/// Masked branch plus reconstruction; enough for the reconstruction
/// objective alone.
pub fn forward_masked<S: Scalar>(
    params: &ModelParams<S>,
    config: &EncoderConfig,
    grid: &PatchGrid,
    mask: &BinaryMask,
) -> Result<(BranchCache<S>, Array2<S>)> {
    let patches = masked_patch_matrix(grid, mask, &params.mask_token)?;
    let branch = forward_branch(params, config, patches, FeatureSource::MaskedInput)?;
    let recon_tokens = params.output.forward(branch.final_tokens());
    Ok((branch, recon_tokens))
}

/// Both branches plus the reconstruction.
#[derive(Debug, Clone)]
pub struct DualOutput<S> {
    pub full: BranchCache<S>,
    pub masked: BranchCache<S>,
    /// `n × P` output of the projection over the masked branch.
    pub recon_tokens: Array2<S>,
    /// The reconstruction reassembled to volume layout.
    pub recon: Array4<S>,
}

/// Shared-weight dual forward: the full branch encodes the raw volume, the
/// masked branch the mask-token-mixed volume, and the output projection maps
/// the masked branch's final tokens back to voxel space.
pub fn forward_dual<S: Scalar>(
    params: &ModelParams<S>,
    config: &EncoderConfig,
    grid: &PatchGrid,
    mask: &BinaryMask,
) -> Result<DualOutput<S>> {
    let full = forward_full(params, config, grid)?;
    let (masked, recon_tokens) = forward_masked(params, config, grid, mask)?;
    let recon = tokens_to_volume(&recon_tokens, config);
    Ok(DualOutput {
        full,
        masked,
        recon_tokens,
        recon,
    })
}

/// Inverse of the patch flattening: `n × P` rows back to `C × H × W × D`.
pub fn tokens_to_volume<S: Scalar>(tokens: &Array2<S>, config: &EncoderConfig) -> Array4<S> {
    let (ph, pw, pd) = config.patch_size;
    let (h, w, d) = config.dims;
    let c_count = config.num_modalities;
    let (gy, gz) = (w / pw, d / pd);
    let block_len = ph * pw * pd;
    let mut out = Array4::zeros((c_count, h, w, d));
    for pos in 0..config.num_positions() {
        let bz = pos % gz;
        let by = (pos / gz) % gy;
        let bx = pos / (gz * gy);
        for c in 0..c_count {
            for px in 0..ph {
                for py in 0..pw {
                    for pz in 0..pd {
                        let col = c * block_len + (px * pw + py) * pd + pz;
                        out[(c, bx * ph + px, by * pw + py, bz * pd + pz)] = tokens[(pos, col)];
                    }
                }
            }
        }
    }
    out
}
