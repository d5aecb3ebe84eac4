//! Quantitative collapse instruments.
//!
//! *Complete collapse* is detected by comparing a run's reconstruction loss
//! to the masked-view variance `Var(x_m)`: the loss a model that emits the
//! per-voxel dataset mean for any input would converge to. The Monte Carlo
//! estimator here is normalized per masked voxel so the two numbers share a
//! scale. *Dimensional collapse* is read off the singular spectrum of
//! learned features via the effective rank (the exponential of the spectral
//! entropy). The mask-overlap graph makes the implicit alignment structure
//! of masked reconstruction inspectable on small instances.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::masking::{MaskKind, MaskStrategy, MaskedViews};
use crate::nn::{forward_dual, EncoderConfig, FeatureSource, ModelParams, Scalar};
use crate::rng::derive_rng;
use crate::volume::{mean_field, partition, MultiModalVolume};

/// Default convergence threshold separating "collapsed" from "normally
/// converged" losses; exposed as a config constant, not hard-coded.
pub const DEFAULT_CONVERGENCE_THRESHOLD: f64 = 0.01;

/// Monte Carlo estimate of the per-masked-voxel variance of the masked view.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    /// Mean, over (volume, mask) draws, of the per-draw mean squared
    /// deviation of masked voxels from the dataset mean field.
    pub mean_var: f64,
    /// Standard error of the per-draw means.
    pub std_error: f64,
    /// Draws that contributed (had at least one masked voxel).
    pub num_draws: usize,
    /// Draws skipped for masking nothing.
    pub num_skipped: usize,
    pub mask_kind: MaskKind,
}

/// Estimates `Var(x_m)` for `strategy` on `volumes`.
///
/// The per-coordinate dataset mean field is computed once; each draw picks a
/// volume uniformly, draws a mask, and averages the squared deviation of the
/// masked voxels from the mean field. Draws run in parallel on independent
/// seeded streams and reduce in draw order, so the result is identical for
/// any thread count.
pub fn estimate_masked_variance(
    volumes: &[MultiModalVolume],
    patch_size: (usize, usize, usize),
    strategy: &MaskStrategy,
    num_draws: usize,
    seed: u64,
) -> Result<VarianceEstimate> {
    if num_draws == 0 {
        return Err(Error::Config("num_draws must be >= 1".into()));
    }
    let mu = mean_field(volumes)?;
    let grid0 = partition(&volumes[0], patch_size)?;
    let (n, c_count) = (grid0.num_positions(), grid0.num_modalities());
    let block_len = grid0.block_len();

    // Per (volume, modality, position): the sum over the block's voxels of
    // the squared deviation from the mean field. Masks select cells, so
    // draws reduce to sums over this table.
    let cell_dev: Vec<Array2<f64>> = volumes
        .iter()
        .map(|vol| {
            let grid = partition(vol, patch_size)?;
            let mut table = Array2::<f64>::zeros((c_count, n));
            let (ph, pw, pd) = patch_size;
            for pos in 0..n {
                let (bx, by, bz) = grid.position_coords(pos);
                for c in 0..c_count {
                    let mut acc = 0.0;
                    for px in 0..ph {
                        for py in 0..pw {
                            for pz in 0..pd {
                                let idx = (c, bx * ph + px, by * pw + py, bz * pd + pz);
                                let dev = vol.data()[idx] as f64 - mu[idx];
                                acc += dev * dev;
                            }
                        }
                    }
                    table[(c, pos)] = acc;
                }
            }
            Ok(table)
        })
        .collect::<Result<_>>()?;

    // Fail fast on bad strategy configs instead of per draw.
    strategy.generate(n, c_count, &mut derive_rng(seed, u64::MAX))?;

    let per_draw: Vec<Option<f64>> = (0..num_draws as u64)
        .into_par_iter()
        .map(|draw| {
            let mut rng = derive_rng(seed, draw);
            let vol_idx = rng.random_range(0..volumes.len());
            let mask = strategy
                .generate(n, c_count, &mut rng)
                .expect("strategy validated above");
            let cells = mask.masked_cell_count();
            if cells == 0 {
                return None;
            }
            let table = &cell_dev[vol_idx];
            let sum: f64 = mask.iter_masked().map(|(c, i)| table[(c, i)]).sum();
            Some(sum / (cells * block_len) as f64)
        })
        .collect();

    let values: Vec<f64> = per_draw.iter().flatten().copied().collect();
    let num_skipped = num_draws - values.len();
    if values.is_empty() {
        return Err(Error::EmptyMask);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let std_error = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    } else {
        0.0
    };
    Ok(VarianceEstimate {
        mean_var: mean,
        std_error,
        num_draws: values.len(),
        num_skipped,
        mask_kind: strategy.kind(),
    })
}

/// Input-independence score of a set of model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrivialScore {
    /// `1 − (mean pairwise output variance / mean pairwise input variance)`,
    /// clamped to `[0, 1]`; near 1 means the outputs ignore the inputs.
    pub score: f64,
    /// Pearson correlation between the average output and the mean target;
    /// `None` when either side is constant.
    pub correlation_with_mean: Option<f64>,
}

fn mean_pairwise_distance(set: &[Array4<f64>]) -> f64 {
    let voxels = set[0].len() as f64;
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let mut d = 0.0;
            for (a, b) in set[i].iter().zip(set[j].iter()) {
                d += (a - b) * (a - b);
            }
            acc += d / voxels;
            pairs += 1;
        }
    }
    acc / pairs as f64
}

fn pearson(a: &Array4<f64>, b: &Array4<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Scores how input-independent `outputs` are, relative to the variation of
/// the `inputs` that produced them.
pub fn trivial_solution_score(
    inputs: &[Array4<f64>],
    outputs: &[Array4<f64>],
    mean_target: &Array4<f64>,
) -> Result<TrivialScore> {
    if inputs.len() < 2 || inputs.len() != outputs.len() {
        return Err(Error::DegenerateProbeSet);
    }
    for (a, b) in inputs.iter().zip(outputs.iter()) {
        if a.dim() != inputs[0].dim() || b.dim() != mean_target.dim() {
            return Err(Error::ShapeMismatch("probe set shapes disagree".into()));
        }
    }
    let input_var = mean_pairwise_distance(inputs);
    if input_var <= 0.0 {
        return Err(Error::DegenerateProbeSet);
    }
    let output_var = mean_pairwise_distance(outputs);
    let score = (1.0 - output_var / input_var).clamp(0.0, 1.0);

    let mut avg = Array4::<f64>::zeros(outputs[0].dim());
    for out in outputs {
        avg += out;
    }
    avg /= outputs.len() as f64;
    Ok(TrivialScore {
        score,
        correlation_with_mean: pearson(&avg, mean_target),
    })
}

/// Singular values of the row-centered feature matrix, descending.
pub fn singular_spectrum(features: &Array2<f64>) -> Result<Vec<f64>> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    let (rows, cols) = features.dim();
    let mut centered = features.clone();
    for c in 0..cols {
        let mean = centered.column(c).sum() / rows as f64;
        centered.column_mut(c).mapv_inplace(|v| v - mean);
    }
    let m = nalgebra::DMatrix::from_row_iterator(rows, cols, centered.iter().copied());
    let mut sigma: Vec<f64> = m.singular_values().iter().copied().collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    Ok(sigma)
}

/// Effective rank of a spectrum: `exp(−Σ p_k ln p_k)` with
/// `p_k = σ_k / Σ σ`; a continuous dimensionality in `[1, #nonzero σ]`.
pub fn effective_rank(sigma: &[f64]) -> Result<f64> {
    if sigma.iter().any(|&s| !s.is_finite() || s < 0.0) {
        return Err(Error::NonFinite("singular spectrum".into()));
    }
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZeroSpectrum);
    }
    let entropy: f64 = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Empirical mask-overlap graph over masked-view samples.
///
/// The weight between two samples is the fraction of `(position, modality)`
/// slots they share on the same side (same position and modality, equal
/// content), and it is nonzero exactly when both the unmasked views and the
/// masked views intersect — the condition under which reconstruction ties
/// the two samples together.
#[derive(Debug, Clone)]
pub struct MaskGraph {
    weights: Array2<f64>,
}

impl MaskGraph {
    pub fn num_nodes(&self) -> usize {
        self.weights.dim().0
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }
}

pub fn build_mask_graph(samples: &[MaskedViews]) -> Result<MaskGraph> {
    if samples.len() < 2 {
        return Err(Error::Config(
            "mask graph needs at least 2 masked-view samples".into(),
        ));
    }
    let c_count = samples[0].mask.num_modalities();
    let n = samples[0].mask.num_positions();
    for s in samples {
        if s.mask.num_modalities() != c_count || s.mask.num_positions() != n {
            return Err(Error::ShapeMismatch(
                "masked-view samples must share one grid shape".into(),
            ));
        }
    }

    // (position, modality) → content, per sample and side.
    type Contents<'a> = std::collections::HashMap<(usize, usize), &'a Array3<f32>>;
    fn index(views: &[crate::masking::ViewPatch]) -> Contents<'_> {
        views
            .iter()
            .map(|p| ((p.position, p.modality), &p.block))
            .collect()
    }
    let tables: Vec<(Contents<'_>, Contents<'_>)> = samples
        .iter()
        .map(|s| (index(&s.unmasked), index(&s.masked)))
        .collect();

    let shared = |a: &Contents<'_>, b: &Contents<'_>| -> usize {
        a.iter()
            .filter(|(key, block)| b.get(key).is_some_and(|other| other == *block))
            .count()
    };

    let total = (c_count * n) as f64;
    let mut weights = Array2::zeros((samples.len(), samples.len()));
    for i in 0..samples.len() {
        for j in i..samples.len() {
            let shared_u = shared(&tables[i].0, &tables[j].0);
            let shared_m = shared(&tables[i].1, &tables[j].1);
            let w = if shared_u > 0 && shared_m > 0 {
                (shared_u + shared_m) as f64 / total
            } else {
                0.0
            };
            weights[(i, j)] = w;
            weights[(j, i)] = w;
        }
    }
    Ok(MaskGraph { weights })
}

/// Options for assembling a [`CollapseReport`].
#[derive(Debug, Clone)]
pub struct CollapseOptions {
    /// Volumes run through the model (the first `probe_size` of the dataset).
    pub probe_size: usize,
    /// Monte Carlo draws for the variance estimate.
    pub num_draws: usize,
    pub seed: u64,
    /// Which branch feeds the singular spectrum. The masked branch is the
    /// one the pretext task shapes, so it is the default.
    pub feature_source: FeatureSource,
    /// Encoder level to tap (defaults to the final level).
    pub feature_level: Option<usize>,
}

impl Default for CollapseOptions {
    fn default() -> Self {
        Self {
            probe_size: 8,
            num_draws: 2_000,
            seed: 0,
            feature_source: FeatureSource::MaskedInput,
            feature_level: None,
        }
    }
}

/// All four collapse instruments over one model/dataset/strategy triple.
#[derive(Debug, Clone)]
pub struct CollapseReport {
    pub variance: VarianceEstimate,
    pub trivial: TrivialScore,
    /// Descending spectrum of the probe features (rows: probe volumes ×
    /// positions, columns: embedding dimensions).
    pub singular_values: Vec<f64>,
    pub effective_rank: f64,
    /// The per-voxel dataset mean — the output a completely collapsed model
    /// converges to.
    pub mean_target: Array4<f64>,
    /// Per-probe masked reconstruction error under the shared probe mask.
    pub per_probe_mim: Vec<f64>,
}

/// Runs `probe_size` dual forward passes (one shared mask drawn from
/// `strategy`) and assembles the variance estimate, trivial-solution score,
/// singular spectrum, and effective rank.
pub fn collapse_report<S: Scalar>(
    params: &ModelParams<S>,
    config: &EncoderConfig,
    volumes: &[MultiModalVolume],
    strategy: &MaskStrategy,
    opts: &CollapseOptions,
) -> Result<CollapseReport> {
    if opts.probe_size < 2 || opts.probe_size > volumes.len() {
        return Err(Error::Config(format!(
            "probe_size must be in [2, {}], got {}",
            volumes.len(),
            opts.probe_size
        )));
    }
    let mean_target = mean_field(volumes)?;
    let variance = estimate_masked_variance(
        volumes,
        config.patch_size,
        strategy,
        opts.num_draws,
        opts.seed,
    )?;

    let n = config.num_positions();
    let mut mask_rng = derive_rng(opts.seed, 0x9a5c);
    let mask = strategy.generate(n, config.num_modalities, &mut mask_rng)?;

    let level = opts.feature_level.unwrap_or(config.pyramid_levels);
    let tap_layer = if config.depth == 0 {
        0
    } else {
        let taps = config.tap_layers();
        *taps
            .get(level.saturating_sub(1))
            .ok_or_else(|| Error::Config(format!("no pyramid level {level}")))?
    };

    let mut inputs = Vec::with_capacity(opts.probe_size);
    let mut outputs = Vec::with_capacity(opts.probe_size);
    let mut per_probe_mim = Vec::with_capacity(opts.probe_size);
    let mut feature_rows: Vec<Array2<f64>> = Vec::with_capacity(opts.probe_size);
    for vol in &volumes[..opts.probe_size] {
        let grid = partition(vol, config.patch_size)?;
        let dual = forward_dual(params, config, &grid, &mask)?;
        let (l_mim, _) = crate::losses::mim_loss(&dual.recon, vol, &mask, config.patch_size)?;
        per_probe_mim.push(l_mim);
        let branch = match opts.feature_source {
            FeatureSource::FullInput => &dual.full,
            FeatureSource::MaskedInput => &dual.masked,
        };
        feature_rows.push(branch.tokens_at(tap_layer).mapv(|v| v.as_f64()));
        outputs.push(dual.recon.mapv(|v| v.as_f64()));
        inputs.push(vol.to_f64());
    }

    let d = config.embed_dim;
    let mut stacked = Array2::zeros((opts.probe_size * n, d));
    for (i, rows) in feature_rows.iter().enumerate() {
        stacked
            .slice_mut(ndarray::s![i * n..(i + 1) * n, ..])
            .assign(rows);
    }
    let singular_values = singular_spectrum(&stacked)?;
    let effective = effective_rank(&singular_values)?;
    let trivial = trivial_solution_score(&inputs, &outputs, &mean_target)?;

    Ok(CollapseReport {
        variance,
        trivial,
        singular_values,
        effective_rank: effective,
        mean_target,
        per_probe_mim,
    })
}

impl CollapseReport {
    /// One row per probe volume.
    pub fn probe_csv(&self) -> String {
        let mut out = String::from("probe,l_mim\n");
        for (i, l) in self.per_probe_mim.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }

    /// `index,sigma` rows for external plotting.
    pub fn spectrum_csv(&self) -> String {
        let mut out = String::from("index,sigma\n");
        for (i, s) in self.singular_values.iter().enumerate() {
            out.push_str(&format!("{i},{s}\n"));
        }
        out
    }

    pub fn summary_text(&self, threshold: f64) -> String {
        let corr = self
            .trivial
            .correlation_with_mean
            .map_or("n/a".to_string(), |c| format!("{c:.6}"));
        format!(
            "mask_kind={}\nvar_mean={}\nvar_std_error={}\nvar_draws={}\nvar_skipped={}\n\
             convergence_threshold={}\ntrivial_score={:.6}\ncorrelation_with_mean={}\n\
             effective_rank={:.6}\ntop_sigma={}\n",
            self.variance.mask_kind,
            self.variance.mean_var,
            self.variance.std_error,
            self.variance.num_draws,
            self.variance.num_skipped,
            threshold,
            self.trivial.score,
            corr,
            self.effective_rank,
            self.singular_values
                .iter()
                .take(8)
                .map(|s| format!("{s:.6}"))
                .collect::<Vec<_>>()
                .join(","),
        )
    }
}
