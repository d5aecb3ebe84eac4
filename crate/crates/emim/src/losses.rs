//! Objectives: the masked reconstruction loss, the per-level
//! cross-correlation and Barlow-twins-style uniformity loss, the pyramid
//! total, and the unweighted joint objective — each with exact gradients.
//!
//! The reconstruction loss is the mean squared error over masked voxels
//! only, so its converged value is directly comparable to the masked-view
//! variance the diagnostics estimate. The uniformity loss at a level `l`
//! drives the cosine cross-correlation matrix between the full-input and
//! masked-input embeddings toward the identity: diagonal terms align the two
//! views of the same position, off-diagonal terms decorrelate different
//! positions.

use ndarray::{Array1, Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::nn::{
    backward_dual, backward_masked_only, forward_dual, forward_masked, tokens_to_volume,
    EncoderConfig, ModelParams, Scalar,
};
use crate::volume::{partition, MultiModalVolume};

/// Scalar components of one objective evaluation.
///
/// `l_overall = l_mim + l_pbt_total`, the exact unweighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_mim: f64,
    pub l_pbt_per_level: Vec<f64>,
    pub l_pbt_total: f64,
    pub l_overall: f64,
}

impl LossBreakdown {
    fn new(l_mim: f64, l_pbt_per_level: Vec<f64>) -> Result<Self> {
        let l_pbt_total: f64 = l_pbt_per_level.iter().sum();
        let l_overall = l_mim + l_pbt_total;
        if !l_overall.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(Self {
            l_mim,
            l_pbt_per_level,
            l_pbt_total,
            l_overall,
        })
    }
}

/// Joins the two loss components; the gradient of the sum is the
/// concatenation of the component gradients, so nothing extra is attached.
pub fn overall_loss(l_mim: f64, l_pbt_per_level: Vec<f64>) -> Result<LossBreakdown> {
    if !l_mim.is_finite() || l_pbt_per_level.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss component".into()));
    }
    LossBreakdown::new(l_mim, l_pbt_per_level)
}

/// Mean squared error over masked voxels, with the gradient with respect to
/// the reconstruction: `2·(recon − target)/N` on masked voxels, `0`
/// elsewhere. Unmasked voxels never contribute.
pub fn mim_loss<S: Scalar>(
    recon: &Array4<S>,
    target: &MultiModalVolume,
    mask: &BinaryMask,
    patch_size: (usize, usize, usize),
) -> Result<(f64, Array4<S>)> {
    if recon.dim() != target.data().dim() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction is {:?}, target is {:?}",
            recon.dim(),
            target.data().dim()
        )));
    }
    let grid = partition(target, patch_size)?;
    if grid.num_modalities() != mask.num_modalities()
        || grid.num_positions() != mask.num_positions()
    {
        return Err(Error::ShapeMismatch(format!(
            "target partitions into {}x{}, mask is {}x{}",
            grid.num_modalities(),
            grid.num_positions(),
            mask.num_modalities(),
            mask.num_positions()
        )));
    }
    let (ph, pw, pd) = patch_size;
    let masked_voxels = mask.masked_cell_count() * grid.block_len();
    if masked_voxels == 0 {
        return Err(Error::EmptyMask);
    }

    let mut grad = Array4::zeros(recon.dim());
    let mut acc = 0.0f64;
    let scale = S::from_f64(2.0 / masked_voxels as f64);
    for (c, i) in mask.iter_masked() {
        let (bx, by, bz) = grid.position_coords(i);
        for px in 0..ph {
            for py in 0..pw {
                for pz in 0..pd {
                    let idx = (c, bx * ph + px, by * pw + py, bz * pd + pz);
                    let diff = recon[idx] - S::from_f64(target.data()[idx] as f64);
                    acc += diff.as_f64() * diff.as_f64();
                    grad[idx] = scale * diff;
                }
            }
        }
    }
    Ok((acc / masked_voxels as f64, grad))
}

fn row_norms<S: Scalar>(z: &Array2<S>) -> Result<Array1<S>> {
    let mut norms = Array1::zeros(z.dim().0);
    for (r, row) in z.rows().into_iter().enumerate() {
        let sq = row.iter().fold(S::zero(), |acc, &v| acc + v * v);
        if sq == S::zero() {
            return Err(Error::ZeroNormRow { row: r });
        }
        norms[r] = sq.sqrt();
    }
    Ok(norms)
}

/// Cosine cross-correlation between row-aligned embeddings:
/// `C_ij = ⟨zf_i, zm_j⟩ / (‖zf_i‖·‖zm_j‖)`, per sample.
pub fn cross_correlation<S: Scalar>(
    z_full: &Array2<S>,
    z_masked: &Array2<S>,
) -> Result<Array2<S>> {
    if z_full.dim() != z_masked.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings are {:?} vs {:?}",
            z_full.dim(),
            z_masked.dim()
        )));
    }
    let nf = row_norms(z_full)?;
    let nm = row_norms(z_masked)?;
    let mut c = z_full.dot(&z_masked.t());
    for ((i, j), v) in c.indexed_iter_mut() {
        *v = *v / (nf[i] * nm[j]);
    }
    Ok(c)
}

/// Gradient of a scalar loss through [`cross_correlation`]:
/// given `dC`, returns `(d z_full, d z_masked)`.
pub fn cross_correlation_backward<S: Scalar>(
    z_full: &Array2<S>,
    z_masked: &Array2<S>,
    c: &Array2<S>,
    dc: &Array2<S>,
) -> Result<(Array2<S>, Array2<S>)> {
    let nf = row_norms(z_full)?;
    let nm = row_norms(z_masked)?;
    let n = c.dim().0;

    // w_ij = dC_ij / (nf_i · nm_j)
    let mut w = dc.clone();
    for ((i, j), v) in w.indexed_iter_mut() {
        *v = *v / (nf[i] * nm[j]);
    }
    let dcc = dc * c;

    let mut d_full = w.dot(z_masked);
    let row_terms = dcc.sum_axis(Axis(1));
    for (i, mut row) in d_full.rows_mut().into_iter().enumerate() {
        let coeff = row_terms[i] / (nf[i] * nf[i]);
        let zr = z_full.row(i);
        for (v, &z) in row.iter_mut().zip(zr.iter()) {
            *v = *v - coeff * z;
        }
    }

    let mut d_masked = w.t().dot(z_full);
    let col_terms = dcc.sum_axis(Axis(0));
    for (j, mut row) in d_masked.rows_mut().into_iter().enumerate() {
        let coeff = col_terms[j] / (nm[j] * nm[j]);
        let zr = z_masked.row(j);
        for (v, &z) in row.iter_mut().zip(zr.iter()) {
            *v = *v - coeff * z;
        }
    }
    debug_assert_eq!(d_full.dim().0, n);
    Ok((d_full, d_masked))
}

/// Barlow-twins-style level loss
/// `Σ_i (1 − C_ii)² + λ·Σ_{i≠j} C_ij²` with its gradient in `C`.
/// `λ` defaults to 1 (see [`pbt_level_loss`]); the identity matrix is the
/// unique zero.
pub fn pbt_level_loss_weighted<S: Scalar>(
    c: &Array2<S>,
    off_diagonal_weight: f64,
) -> (f64, Array2<S>) {
    let lambda = S::from_f64(off_diagonal_weight);
    let two = S::from_f64(2.0);
    let mut grad = Array2::zeros(c.dim());
    let mut loss = 0.0f64;
    for ((i, j), &v) in c.indexed_iter() {
        if i == j {
            let miss = S::one() - v;
            loss += (miss * miss).as_f64();
            grad[(i, j)] = -two * miss;
        } else {
            loss += (lambda * v * v).as_f64();
            grad[(i, j)] = two * lambda * v;
        }
    }
    (loss, grad)
}

/// [`pbt_level_loss_weighted`] with the default unit off-diagonal weight.
pub fn pbt_level_loss<S: Scalar>(c: &Array2<S>) -> (f64, Array2<S>) {
    pbt_level_loss_weighted(c, 1.0)
}

/// Unweighted sum over pyramid levels.
pub fn pbt_total_loss(per_level: &[f64]) -> f64 {
    per_level.iter().sum()
}

/// One full objective evaluation on a single sample.
pub struct ObjectiveOutput<S: Scalar> {
    pub breakdown: LossBreakdown,
    /// `None` when evaluated without gradients.
    pub grads: Option<ModelParams<S>>,
    /// The reconstruction, for callers that inspect outputs.
    pub recon: Array4<S>,
}

/// Evaluates the joint objective (reconstruction plus, when `pbt_enabled`,
/// the pyramid uniformity losses) on one volume/mask pair; with
/// `with_grads`, also the exact gradient for every parameter.
pub fn objective<S: Scalar>(
    params: &ModelParams<S>,
    config: &EncoderConfig,
    volume: &MultiModalVolume,
    mask: &BinaryMask,
    pbt_enabled: bool,
    with_grads: bool,
) -> Result<ObjectiveOutput<S>> {
    let grid = partition(volume, config.patch_size)?;

    if !pbt_enabled {
        let (masked, recon_tokens) = forward_masked(params, config, &grid, mask)?;
        let recon = tokens_to_volume(&recon_tokens, config);
        let (l_mim, d_recon) = mim_loss(&recon, volume, mask, config.patch_size)?;
        let breakdown = LossBreakdown::new(l_mim, vec![])?;
        let grads = with_grads.then(|| {
            let no_taps = vec![None; config.tap_layers().len()];
            backward_masked_only(params, config, &masked, mask, &no_taps, &d_recon)
        });
        return Ok(ObjectiveOutput {
            breakdown,
            grads,
            recon,
        });
    }

    let dual = forward_dual(params, config, &grid, mask)?;
    let (l_mim, d_recon) = mim_loss(&dual.recon, volume, mask, config.patch_size)?;

    let taps = config.tap_layers();
    let mut per_level = Vec::with_capacity(taps.len());
    let mut d_full_taps = Vec::with_capacity(taps.len());
    let mut d_masked_taps = Vec::with_capacity(taps.len());
    for &layer in &taps {
        let zf = dual.full.tokens_at(layer);
        let zm = dual.masked.tokens_at(layer);
        let c = cross_correlation(zf, zm)?;
        let (loss_l, dc) = pbt_level_loss(&c);
        per_level.push(loss_l);
        if with_grads {
            let (dzf, dzm) = cross_correlation_backward(zf, zm, &c, &dc)?;
            d_full_taps.push(Some(dzf));
            d_masked_taps.push(Some(dzm));
        }
    }
    let breakdown = LossBreakdown::new(l_mim, per_level)?;
    let grads = with_grads.then(|| {
        backward_dual(
            params,
            config,
            &dual,
            mask,
            &d_full_taps,
            &d_masked_taps,
            &d_recon,
        )
    });
    Ok(ObjectiveOutput {
        breakdown,
        grads,
        recon: dual.recon,
    })
}
