//! Reverse-mode gradients through both branches.
//!
//! Gradients arrive at tap-level features (from the uniformity losses) and
//! at the reconstruction tokens (from the reconstruction loss); they flow
//! back through blocks, attention, normalization, and the embedding, and
//! accumulate into a single [`ModelParams`]-shaped gradient container —
//! shared weights sum the contributions of both branches.

use ndarray::{s, Array1, Array2, Array4, Axis};

use super::forward::{gelu_grad, BlockCache, BranchCache, DualOutput, LnCache};
use super::params::{Block, Linear, ModelParams};
use super::{EncoderConfig, Scalar};
use crate::masking::BinaryMask;

/// `y = x Wᵀ + b`: accumulates `dW`, `db`, returns `dx`.
fn linear_backward<S: Scalar>(
    params: &Linear<S>,
    x: &Array2<S>,
    dy: &Array2<S>,
    grads: &mut Linear<S>,
) -> Array2<S> {
    grads.weight = &grads.weight + &dy.t().dot(x);
    grads.bias = &grads.bias + &dy.sum_axis(Axis(0));
    dy.dot(&params.weight)
}

/// Standard layer-norm backward from the cached normalized rows.
fn layer_norm_backward<S: Scalar>(
    gamma: &Array1<S>,
    cache: &LnCache<S>,
    dy: &Array2<S>,
    dgamma: &mut Array1<S>,
    dbeta: &mut Array1<S>,
) -> Array2<S> {
    let (rows, cols) = dy.dim();
    *dbeta = &*dbeta + &dy.sum_axis(Axis(0));
    *dgamma = &*dgamma + &(dy * &cache.x_hat).sum_axis(Axis(0));
    let dxhat = dy * &gamma.view().insert_axis(Axis(0));
    let inv_cols = S::from_f64(1.0 / cols as f64);
    let mut dx = Array2::zeros((rows, cols));
    for r in 0..rows {
        let dxh = dxhat.row(r);
        let xh = cache.x_hat.row(r);
        let mean_dxh = dxh.sum() * inv_cols;
        let mean_dxh_xh = dxh
            .iter()
            .zip(xh.iter())
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b)
            * inv_cols;
        let is = cache.inv_std[r];
        for c in 0..cols {
            dx[(r, c)] = is * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

/// Softmax backward per row: `ds = a ∘ (da − rowsum(da ∘ a))`.
fn softmax_backward<S: Scalar>(attn: &Array2<S>, dattn: &Array2<S>) -> Array2<S> {
    let mut ds = Array2::zeros(attn.dim());
    for (r, (arow, darow)) in attn.rows().into_iter().zip(dattn.rows()).enumerate() {
        let dot = arow
            .iter()
            .zip(darow.iter())
            .fold(S::zero(), |acc, (&a, &d)| acc + a * d);
        for (c, (&a, &d)) in arow.iter().zip(darow.iter()).enumerate() {
            ds[(r, c)] = a * (d - dot);
        }
    }
    ds
}

fn block_backward<S: Scalar>(
    params: &Block<S>,
    cache: &BlockCache<S>,
    d_out: &Array2<S>,
    num_heads: usize,
    grads: &mut Block<S>,
) -> Array2<S> {
    let (n, d) = d_out.dim();
    let head_dim = d / num_heads;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());

    // MLP sub-layer: out = h_mid + w2(gelu(w1(ln2(h_mid)))).
    let d_act = linear_backward(&params.w2, &cache.mlp_act, d_out, &mut grads.w2);
    let d_pre = &d_act * &cache.mlp_pre.mapv(gelu_grad);
    let d_ln2_out = linear_backward(&params.w1, &cache.ln2_out, &d_pre, &mut grads.w1);
    let d_h_mid = d_out
        + &layer_norm_backward(
            &params.ln2.gamma,
            &cache.ln2,
            &d_ln2_out,
            &mut grads.ln2.gamma,
            &mut grads.ln2.beta,
        );

    // Attention sub-layer: h_mid = x_in + wo(concat(heads)).
    let d_concat = linear_backward(&params.wo, &cache.concat, &d_h_mid, &mut grads.wo);
    let mut d_q = Array2::zeros((n, d));
    let mut d_k = Array2::zeros((n, d));
    let mut d_v = Array2::zeros((n, d));
    for h in 0..num_heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let d_oh = d_concat.slice(s![.., cols.clone()]);
        let attn = &cache.attn[h];
        let vh = cache.v.slice(s![.., cols.clone()]);
        let qh = cache.q.slice(s![.., cols.clone()]);
        let kh = cache.k.slice(s![.., cols.clone()]);

        let d_attn = d_oh.dot(&vh.t());
        d_v.slice_mut(s![.., cols.clone()])
            .assign(&attn.t().dot(&d_oh));
        let mut d_scores = softmax_backward(attn, &d_attn);
        d_scores.mapv_inplace(|v| v * scale);
        d_q.slice_mut(s![.., cols.clone()]).assign(&d_scores.dot(&kh));
        d_k.slice_mut(s![.., cols]).assign(&d_scores.t().dot(&qh));
    }
    let mut d_ln1_out = linear_backward(&params.wq, &cache.ln1_out, &d_q, &mut grads.wq);
    d_ln1_out = d_ln1_out + linear_backward(&params.wk, &cache.ln1_out, &d_k, &mut grads.wk);
    d_ln1_out = d_ln1_out + linear_backward(&params.wv, &cache.ln1_out, &d_v, &mut grads.wv);

    d_h_mid
        + &layer_norm_backward(
            &params.ln1.gamma,
            &cache.ln1,
            &d_ln1_out,
            &mut grads.ln1.gamma,
            &mut grads.ln1.beta,
        )
}

/// Backs one branch from per-tap gradients (level order, `None` for levels
/// without a gradient) plus an optional gradient at the final tokens.
/// Accumulates parameter gradients; returns the gradient at `tokens0`.
fn branch_backward<S: Scalar>(
    params: &ModelParams<S>,
    config: &EncoderConfig,
    cache: &BranchCache<S>,
    d_taps: &[Option<Array2<S>>],
    d_final: Option<Array2<S>>,
    grads: &mut ModelParams<S>,
) -> Array2<S> {
    let taps = config.tap_layers();
    assert_eq!(d_taps.len(), taps.len(), "one gradient slot per tap level");
    let n = cache.tokens0.dim().0;
    let d = cache.tokens0.dim().1;
    let mut current = d_final.unwrap_or_else(|| Array2::zeros((n, d)));

    for layer in (1..=cache.blocks.len()).rev() {
        for (idx, &tap) in taps.iter().enumerate() {
            if tap == layer {
                if let Some(dt) = &d_taps[idx] {
                    current = current + dt;
                }
            }
        }
        current = block_backward(
            &params.blocks[layer - 1],
            &cache.blocks[layer - 1],
            &current,
            config.num_heads,
            &mut grads.blocks[layer - 1],
        );
    }
    // Taps at layer 0 (depth-0 encoders) hit the embedding directly.
    for (idx, &tap) in taps.iter().enumerate() {
        if tap == 0 {
            if let Some(dt) = &d_taps[idx] {
                current = current + dt;
            }
        }
    }
    current
}

/// Embedding backward: `tokens0 = embed(patches) + pos`. Returns the
/// gradient at the patch matrix for mask-token accumulation.
fn embed_backward<S: Scalar>(
    params: &ModelParams<S>,
    patches: &Array2<S>,
    d_tokens0: &Array2<S>,
    grads: &mut ModelParams<S>,
) -> Array2<S> {
    grads.pos = &grads.pos + d_tokens0;
    linear_backward(&params.embed, patches, d_tokens0, &mut grads.embed)
}

/// Routes patch-matrix gradients of masked segments into the mask token.
fn accumulate_mask_token_grad<S: Scalar>(
    d_patches: &Array2<S>,
    mask: &BinaryMask,
    block_len: usize,
    grads: &mut ModelParams<S>,
) {
    for (c, i) in mask.iter_masked() {
        let seg = c * block_len..(c + 1) * block_len;
        let d_seg = d_patches.slice(s![i, seg.clone()]);
        let mut acc = grads.mask_token.slice_mut(s![seg]);
        acc += &d_seg;
    }
}

/// Maps a gradient in volume layout back onto reconstruction tokens; the
/// exact transpose of [`super::forward::tokens_to_volume`].
pub fn volume_grad_to_tokens<S: Scalar>(d_volume: &Array4<S>, config: &EncoderConfig) -> Array2<S> {
    let (ph, pw, pd) = config.patch_size;
    let (_, w, d) = config.dims;
    let (gy, gz) = (w / pw, d / pd);
    let block_len = ph * pw * pd;
    let n = config.num_positions();
    let mut out = Array2::zeros((n, config.patch_len()));
    for pos in 0..n {
        let bz = pos % gz;
        let by = (pos / gz) % gy;
        let bx = pos / (gz * gy);
        for c in 0..config.num_modalities {
            for px in 0..ph {
                for py in 0..pw {
                    for pz in 0..pd {
                        let col = c * block_len + (px * pw + py) * pd + pz;
                        out[(pos, col)] =
                            d_volume[(c, bx * ph + px, by * pw + py, bz * pd + pz)];
                    }
                }
            }
        }
    }
    out
}

/// Backward through the whole dual pass.
///
/// `d_full_taps` / `d_masked_taps` carry per-level feature gradients,
/// `d_recon` the gradient at the reconstruction volume. Contributions from
/// both branches accumulate into one gradient store.
pub fn backward_dual<S: Scalar>(
    params: &ModelParams<S>,
    config: &EncoderConfig,
    dual: &DualOutput<S>,
    mask: &BinaryMask,
    d_full_taps: &[Option<Array2<S>>],
    d_masked_taps: &[Option<Array2<S>>],
    d_recon: &Array4<S>,
) -> ModelParams<S> {
    let mut grads = backward_masked_only(
        params,
        config,
        &dual.masked,
        mask,
        d_masked_taps,
        d_recon,
    );
    if d_full_taps.iter().any(Option::is_some) {
        let d_tokens0_full =
            branch_backward(params, config, &dual.full, d_full_taps, None, &mut grads);
        embed_backward(params, &dual.full.patches, &d_tokens0_full, &mut grads);
    }
    grads
}

/// Masked-branch-only backward (reconstruction objective alone).
pub fn backward_masked_only<S: Scalar>(
    params: &ModelParams<S>,
    config: &EncoderConfig,
    masked: &BranchCache<S>,
    mask: &BinaryMask,
    d_masked_taps: &[Option<Array2<S>>],
    d_recon: &Array4<S>,
) -> ModelParams<S> {
    let mut grads = params.zeros_like();
    let block_len = config.patch_len() / config.num_modalities;

    let d_recon_tokens = volume_grad_to_tokens(d_recon, config);
    let d_final = linear_backward(
        &params.output,
        masked.final_tokens(),
        &d_recon_tokens,
        &mut grads.output,
    );
    let d_tokens0 = branch_backward(params, config, masked, d_masked_taps, Some(d_final), &mut grads);
    let d_patches = embed_backward(params, &masked.patches, &d_tokens0, &mut grads);
    accumulate_mask_token_grad(&d_patches, mask, block_len, &mut grads);
    grads
}
