//! Linear probing on synthetic lesion labels.
//!
//! The evaluation logic mirrors the standard protocol: freeze the encoder,
//! mean-pool its final-level features, and train only a logistic head. The
//! features come from the masked branch under one shared probe mask — the
//! state the pretext task actually shaped. A completely collapsed encoder
//! emits input-independent tokens there, so it probes at chance, while an
//! encoder that learned reconstruction keeps content in those tokens. The
//! task is lesion-present vs lesion-absent, which the generator labels for
//! free.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::masking::random_mask;
use crate::nn::{forward_branch, masked_patch_matrix, patch_matrix, EncoderConfig, FeatureSource, ModelParams, Scalar};
use crate::rng::{derive_rng, splitmix64};
use crate::volume::{generate_dataset, partition, MultiModalVolume, SyntheticDatasetConfig};

/// Volumes with binary labels, interleaved `true, false, true, …` so every
/// prefix split stays balanced.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub volumes: Vec<MultiModalVolume>,
    pub labels: Vec<bool>,
}

/// `num_pairs` lesioned and `num_pairs` clean volumes from `base` (only
/// `lesion_fraction` differs between the classes).
pub fn generate_lesion_probe_set(
    base: &SyntheticDatasetConfig,
    num_pairs: usize,
    lesion_fraction: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_pairs == 0 {
        return Err(Error::Config("num_pairs must be >= 1".into()));
    }
    let lesioned = generate_dataset(&SyntheticDatasetConfig {
        num_samples: num_pairs,
        lesion_fraction,
        seed: splitmix64(seed ^ 0x1e51),
        ..base.clone()
    })?;
    let clean = generate_dataset(&SyntheticDatasetConfig {
        num_samples: num_pairs,
        lesion_fraction: 0.0,
        seed: splitmix64(seed ^ 0xc1ea),
        ..base.clone()
    })?;
    let mut volumes = Vec::with_capacity(2 * num_pairs);
    let mut labels = Vec::with_capacity(2 * num_pairs);
    for (a, b) in lesioned.into_iter().zip(clean) {
        volumes.push(a);
        labels.push(true);
        volumes.push(b);
        labels.push(false);
    }
    Ok(LabeledDataset { volumes, labels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Leading fraction of the set used for training the head.
    pub train_fraction: f64,
    pub gd_steps: usize,
    pub gd_lr: f64,
    /// Which branch supplies the pooled features.
    pub feature_source: FeatureSource,
    /// Ratio of the shared probe mask (masked-branch probing only).
    pub mask_ratio: f64,
    /// Seed of the shared probe mask.
    pub mask_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            gd_steps: 800,
            gd_lr: 0.5,
            feature_source: FeatureSource::MaskedInput,
            mask_ratio: 0.5,
            mask_seed: 0xbe5e,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    /// Held-out accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub num_train: usize,
    pub num_eval: usize,
}

/// Mean-pooled final-level features of the frozen encoder.
fn pooled_features<S: Scalar>(
    params: &ModelParams<S>,
    encoder: &EncoderConfig,
    volume: &MultiModalVolume,
    probe_mask: Option<&crate::masking::BinaryMask>,
) -> Result<Array1<f64>> {
    let grid = partition(volume, encoder.patch_size)?;
    let (patches, source) = match probe_mask {
        Some(mask) => (
            masked_patch_matrix(&grid, mask, &params.mask_token)?,
            FeatureSource::MaskedInput,
        ),
        None => (patch_matrix(&grid), FeatureSource::FullInput),
    };
    let branch = forward_branch(params, encoder, patches, source)?;
    let tokens = branch.final_tokens();
    let n = tokens.dim().0 as f64;
    let mut pooled = Array1::zeros(tokens.dim().1);
    for row in tokens.rows() {
        for (acc, &v) in pooled.iter_mut().zip(row.iter()) {
            *acc += v.as_f64() / n;
        }
    }
    Ok(pooled)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Freezes the encoder and trains a logistic head by full-batch gradient
/// descent on pooled features. Features are centered and rescaled by one
/// global factor (the root-mean per-dimension variance of the training
/// split), not per dimension: a collapsed encoder's residual content lives
/// at a tiny relative scale, and per-dimension whitening would re-amplify
/// exactly the directions the encoder suppressed.
pub fn linear_probe<S: Scalar>(
    params: &ModelParams<S>,
    encoder: &EncoderConfig,
    data: &LabeledDataset,
    probe: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if data.volumes.len() != data.labels.len() || data.volumes.len() < 4 {
        return Err(Error::Config("probe set needs at least 4 labeled volumes".into()));
    }
    if !data.labels.iter().any(|&l| l) || !data.labels.iter().any(|&l| !l) {
        return Err(Error::SingleClass);
    }

    let probe_mask = match probe.feature_source {
        FeatureSource::MaskedInput => {
            let mut rng = derive_rng(probe.mask_seed, 0);
            Some(random_mask(
                encoder.num_positions(),
                encoder.num_modalities,
                probe.mask_ratio,
                &mut rng,
            )?)
        }
        FeatureSource::FullInput => None,
    };

    let d = encoder.embed_dim;
    let mut features = Array2::zeros((data.volumes.len(), d));
    for (i, vol) in data.volumes.iter().enumerate() {
        features
            .row_mut(i)
            .assign(&pooled_features(params, encoder, vol, probe_mask.as_ref())?);
    }

    let num_train = ((data.volumes.len() as f64) * probe.train_fraction).round() as usize;
    let num_train = num_train.clamp(2, data.volumes.len() - 2);
    let num_eval = data.volumes.len() - num_train;

    let mut mean = vec![0.0; d];
    let mut total_var = 0.0;
    for j in 0..d {
        let col: Vec<f64> = (0..num_train).map(|i| features[(i, j)]).collect();
        let m = col.iter().sum::<f64>() / num_train as f64;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / num_train as f64;
        mean[j] = m;
        total_var += var;
    }
    let global_scale = (total_var / d as f64).sqrt();
    let mut x = features.clone();
    for ((i, j), v) in x.indexed_iter_mut() {
        *v = if global_scale > 1e-8 {
            (features[(i, j)] - mean[j]) / global_scale
        } else {
            0.0
        };
    }

    let mut weights = vec![0.0f64; d];
    let mut bias = 0.0f64;
    for _ in 0..probe.gd_steps {
        let mut gw = vec![0.0f64; d];
        let mut gb = 0.0f64;
        for i in 0..num_train {
            let z = bias
                + (0..d).map(|j| weights[j] * x[(i, j)]).sum::<f64>();
            let err = sigmoid(z) - if data.labels[i] { 1.0 } else { 0.0 };
            for j in 0..d {
                gw[j] += err * x[(i, j)];
            }
            gb += err;
        }
        for j in 0..d {
            weights[j] -= probe.gd_lr * gw[j] / num_train as f64;
        }
        bias -= probe.gd_lr * gb / num_train as f64;
    }

    let accuracy_on = |range: std::ops::Range<usize>| {
        let mut correct = 0usize;
        for i in range.clone() {
            let z = bias + (0..d).map(|j| weights[j] * x[(i, j)]).sum::<f64>();
            if (z >= 0.0) == data.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / range.len() as f64
    };

    Ok(ProbeOutcome {
        accuracy: accuracy_on(num_train..data.volumes.len()),
        train_accuracy: accuracy_on(0..num_train),
        num_train,
        num_eval,
    })
}
