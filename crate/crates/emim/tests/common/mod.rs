//! Shared oracles for integration tests.
//!
//! Everything here is an independent route to a number the library also
//! computes: central finite differences for gradients, exhaustive
//! enumeration for the masked-view variance, set-based pair counting for the
//! mask graph. None of it calls the code path it checks.

#![allow(dead_code)]

use emim::losses::objective;
use emim::masking::{BinaryMask, MaskedViews};
use emim::nn::{EncoderConfig, ModelParams};
use emim::rng::derive_rng;
use emim::volume::{
    generate_dataset, mean_field, partition, MultiModalVolume, SyntheticDatasetConfig,
};
use rand::Rng;

/// Central finite differences of the joint objective for up to
/// `coords_per_tensor` coordinates of every parameter tensor.
/// Returns `(coords_checked, max_relative_error)`.
pub fn fd_check(
    params: &ModelParams<f64>,
    config: &EncoderConfig,
    volume: &MultiModalVolume,
    mask: &BinaryMask,
    pbt: bool,
    coords_per_tensor: usize,
    step: f64,
) -> (usize, f64) {
    let analytic = objective(params, config, volume, mask, pbt, true)
        .expect("objective evaluates")
        .grads
        .expect("gradients requested");

    let eval = |p: &ModelParams<f64>| -> f64 {
        objective(p, config, volume, mask, pbt, false)
            .expect("objective evaluates")
            .breakdown
            .l_overall
    };

    let num_tensors = params.named().len();
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    for ti in 0..num_tensors {
        let len = params.named()[ti].1.len();
        let mut rng = derive_rng(0xfd, ti as u64);
        let coords: Vec<usize> = if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            (0..coords_per_tensor)
                .map(|_| rng.random_range(0..len))
                .collect()
        };
        for e in coords {
            let mut plus = params.clone();
            plus.named_mut()[ti].1.as_mut_slice()[e] += step;
            let mut minus = params.clone();
            minus.named_mut()[ti].1.as_mut_slice()[e] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic.named()[ti].1.as_slice()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    (checked, max_rel)
}

/// Moves every parameter to a generic point: init-scale weights leave the
/// attention path nearly linear with gradients at the 1e-8 noise floor of
/// central differences, so checks perturb first.
pub fn noised(params: &ModelParams<f64>, amplitude: f64, seed: u64) -> ModelParams<f64> {
    let mut out = params.clone();
    let mut rng = derive_rng(seed, 0);
    for (_, mut t) in out.named_mut() {
        for v in t.as_mut_slice() {
            *v += rng.random_range(-amplitude..amplitude);
        }
    }
    out
}

/// The depth-2, n=4, d=4 gradient-check model.
pub fn gradcheck_config() -> EncoderConfig {
    EncoderConfig {
        num_modalities: 2,
        dims: (4, 4, 2),
        patch_size: (2, 2, 2),
        depth: 2,
        embed_dim: 4,
        num_heads: 2,
        pyramid_levels: 2,
        seed: 17,
        ..EncoderConfig::default()
    }
}

pub fn gradcheck_volume() -> MultiModalVolume {
    let config = SyntheticDatasetConfig {
        num_samples: 1,
        num_modalities: 2,
        dims: (4, 4, 2),
        diversity: 0.3,
        modality_offsets: SyntheticDatasetConfig::default_offsets(2),
        lesion_fraction: 0.05,
        seed: 99,
    };
    generate_dataset(&config).unwrap().remove(0)
}

/// Exhaustive masked-view variance for the exactly-`k`-positions random
/// strategy: enumerates every (volume, position-combination) pair.
pub fn exhaustive_random_variance(
    volumes: &[MultiModalVolume],
    patch_size: (usize, usize, usize),
    k: usize,
) -> f64 {
    let mu = mean_field(volumes).unwrap();
    let grid0 = partition(&volumes[0], patch_size).unwrap();
    let n = grid0.num_positions();
    let c_count = grid0.num_modalities();
    let (ph, pw, pd) = patch_size;
    let block_voxels = ph * pw * pd;

    let combos: Vec<Vec<usize>> = combinations(n, k);
    let mut acc = 0.0;
    let mut count = 0usize;
    for vol in volumes {
        let grid = partition(vol, patch_size).unwrap();
        for combo in &combos {
            let mut dev = 0.0;
            for &pos in combo {
                let (bx, by, bz) = grid.position_coords(pos);
                for c in 0..c_count {
                    for px in 0..ph {
                        for py in 0..pw {
                            for pz in 0..pd {
                                let idx = (c, bx * ph + px, by * pw + py, bz * pd + pz);
                                let d = vol.data()[idx] as f64 - mu[idx];
                                dev += d * d;
                            }
                        }
                    }
                }
            }
            acc += dev / (combo.len() * c_count * block_voxels) as f64;
            count += 1;
        }
    }
    acc / count as f64
}

/// All k-subsets of `0..n` (recursive enumeration; test-scale sizes only).
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 0 {
            out.push(prefix.clone());
            return;
        }
        for i in start..=n - k {
            prefix.push(i);
            rec(i + 1, n, k - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Pair-counting oracle for the mask graph: set intersections over
/// `(position, modality, content-bits)` identities.
pub fn graph_weight_oracle(a: &MaskedViews, b: &MaskedViews) -> f64 {
    use std::collections::HashSet;
    let key_set = |patches: &[emim::masking::ViewPatch]| -> HashSet<(usize, usize, Vec<u32>)> {
        patches
            .iter()
            .map(|p| {
                (
                    p.position,
                    p.modality,
                    p.block.iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    };
    let shared_u = key_set(&a.unmasked)
        .intersection(&key_set(&b.unmasked))
        .count();
    let shared_m = key_set(&a.masked).intersection(&key_set(&b.masked)).count();
    let total = (a.mask.num_modalities() * a.mask.num_positions()) as f64;
    if shared_u > 0 && shared_m > 0 {
        (shared_u + shared_m) as f64 / total
    } else {
        0.0
    }
}
