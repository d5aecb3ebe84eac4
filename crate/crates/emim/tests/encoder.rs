//! Forward-pass behavior: embedding algebra, equivariance, the scripted
//! single-block oracle, dual-branch contracts, determinism, and checkpoints.

mod common;

use common::{gradcheck_config, gradcheck_volume};
use emim::error::Error;
use emim::masking::random_mask;
use emim::nn::{
    forward_branch, forward_dual, forward_full, load_checkpoint, patch_matrix, save_checkpoint,
    EncoderConfig, FeatureSource, ModelParams, Precision,
};
use emim::rng::derive_rng;
use emim::volume::{generate_dataset, partition, SyntheticDatasetConfig};
use ndarray::{Array1, Array2};

fn tiny_config(depth: usize, embed_dim: usize, num_heads: usize) -> EncoderConfig {
    EncoderConfig {
        num_modalities: 2,
        dims: (4, 4, 2),
        patch_size: (2, 2, 2),
        depth,
        embed_dim,
        num_heads,
        pyramid_levels: if depth == 0 { 1 } else { depth },
        seed: 3,
        precision: Precision::F64,
    }
}

#[test]
fn zero_patches_embed_to_positional_embeddings() {
    let config = tiny_config(0, 4, 1);
    let params = ModelParams::<f64>::init(&config).unwrap();
    let zeros = Array2::<f64>::zeros((config.num_positions(), config.patch_len()));
    // Zero bias: strip it so the embedding is a pure linear map.
    let mut params = params;
    params.embed.bias.fill(0.0);
    let branch = forward_branch(&params, &config, zeros, FeatureSource::FullInput).unwrap();
    let diff = (&branch.tokens0 - &params.pos).mapv(f64::abs).sum();
    assert_eq!(diff, 0.0);
}

#[test]
fn identical_patches_differ_exactly_by_position_embedding() {
    let config = tiny_config(0, 4, 1);
    let params = ModelParams::<f64>::init(&config).unwrap();
    let mut patches = Array2::<f64>::zeros((config.num_positions(), config.patch_len()));
    for mut row in patches.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = 0.1 * j as f64;
        }
    }
    let branch = forward_branch(&params, &config, patches, FeatureSource::FullInput).unwrap();
    let t = &branch.tokens0;
    for i in 1..config.num_positions() {
        for j in 0..config.embed_dim {
            let token_diff = t[(i, j)] - t[(0, j)];
            let pos_diff = params.pos[(i, j)] - params.pos[(0, j)];
            assert!((token_diff - pos_diff).abs() < 1e-12);
        }
    }
}

#[test]
fn patch_embedding_matches_direct_matrix_arithmetic() {
    // Two patches, d = 3: token_i = W·x_i + b + pos_i by scalar loops.
    let config = EncoderConfig {
        num_modalities: 1,
        dims: (4, 2, 2),
        patch_size: (2, 2, 2),
        depth: 0,
        embed_dim: 3,
        num_heads: 1,
        pyramid_levels: 1,
        seed: 12,
        precision: Precision::F64,
    };
    let params = ModelParams::<f64>::init(&config).unwrap();
    let mut patches = Array2::<f64>::zeros((2, 8));
    for (k, v) in patches.iter_mut().enumerate() {
        *v = (k as f64 * 0.37).sin();
    }
    let branch =
        forward_branch(&params, &config, patches.clone(), FeatureSource::FullInput).unwrap();
    for i in 0..2 {
        for o in 0..3 {
            let mut expect = params.embed.bias[o] + params.pos[(i, o)];
            for k in 0..8 {
                expect += params.embed.weight[(o, k)] * patches[(i, k)];
            }
            assert!((branch.tokens0[(i, o)] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn depth_zero_taps_the_embedding_itself() {
    let config = tiny_config(0, 4, 1);
    let params = ModelParams::<f64>::init(&config).unwrap();
    let volume = gradcheck_volume();
    let grid = partition(&volume, config.patch_size).unwrap();
    let branch = forward_full(&params, &config, &grid).unwrap();
    let features = branch.tap_features(&config);
    assert_eq!(features.len(), 1);
    assert_eq!(features[0].level, 0);
    let diff = (&features[0].matrix - &branch.tokens0).mapv(f64::abs).sum();
    assert_eq!(diff, 0.0);
}

#[test]
fn encoder_is_permutation_equivariant() {
    // Permuting token rows (content and positions together) permutes every
    // block's output rows identically.
    let config = tiny_config(2, 4, 2);
    let params = ModelParams::<f64>::init(&config).unwrap();
    let n = config.num_positions();
    let mut tokens = Array2::<f64>::zeros((n, 4));
    for (k, v) in tokens.iter_mut().enumerate() {
        *v = (k as f64 * 0.61).cos();
    }
    let perm: Vec<usize> = vec![2, 0, 3, 1];

    let base = emim::nn::encoder_forward(
        &params,
        tokens.clone(),
        config.num_heads,
        FeatureSource::FullInput,
        Array2::zeros((n, config.patch_len())),
    )
    .unwrap();
    let mut permuted = Array2::<f64>::zeros((n, 4));
    for (i, &p) in perm.iter().enumerate() {
        permuted.row_mut(i).assign(&tokens.row(p));
    }
    let shuffled = emim::nn::encoder_forward(
        &params,
        permuted,
        config.num_heads,
        FeatureSource::FullInput,
        Array2::zeros((n, config.patch_len())),
    )
    .unwrap();

    let a = base.final_tokens();
    let b = shuffled.final_tokens();
    for (i, &p) in perm.iter().enumerate() {
        for j in 0..4 {
            assert!((b[(i, j)] - a[(p, j)]).abs() < 1e-12);
        }
    }
}

/// A from-scratch scalar transcription of one pre-norm block, written
/// without the library's linear algebra helpers.
fn naive_block(
    x: &[Vec<f64>],
    ln1: (&[f64], &[f64]),
    wq: (&[Vec<f64>], &[f64]),
    wk: (&[Vec<f64>], &[f64]),
    wv: (&[Vec<f64>], &[f64]),
    wo: (&[Vec<f64>], &[f64]),
    ln2: (&[f64], &[f64]),
    w1: (&[Vec<f64>], &[f64]),
    w2: (&[Vec<f64>], &[f64]),
) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let layer_norm = |rows: &[Vec<f64>], gamma: &[f64], beta: &[f64]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + 1e-6).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(j, v)| gamma[j] * (v - mean) * inv + beta[j])
                    .collect()
            })
            .collect()
    };
    let linear = |rows: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|row| {
                (0..w.len())
                    .map(|o| b[o] + row.iter().zip(&w[o]).map(|(a, c)| a * c).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let norm1 = layer_norm(x, ln1.0, ln1.1);
    let q = linear(&norm1, wq.0, wq.1);
    let k = linear(&norm1, wk.0, wk.1);
    let v = linear(&norm1, wv.0, wv.1);
    // Single head.
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn_out = vec![vec![0.0; d]; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| scale * q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..n {
            for c in 0..d {
                attn_out[i][c] += exps[j] / total * v[j][c];
            }
        }
    }
    let proj = linear(&attn_out, wo.0, wo.1);
    let h_mid: Vec<Vec<f64>> = x
        .iter()
        .zip(&proj)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    let norm2 = layer_norm(&h_mid, ln2.0, ln2.1);
    let pre = linear(&norm2, w1.0, w1.1);
    let gelu = |x: f64| {
        let a = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (a * (x + 0.044715 * x * x * x)).tanh())
    };
    let act: Vec<Vec<f64>> = pre
        .iter()
        .map(|row| row.iter().map(|&v| gelu(v)).collect())
        .collect();
    let mlp = linear(&act, w2.0, w2.1);
    h_mid
        .iter()
        .zip(&mlp)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect()
}

#[test]
fn single_block_matches_scripted_oracle() {
    // depth 1, one head, d = 2, n = 2, hand-set weights.
    let config = EncoderConfig {
        num_modalities: 1,
        dims: (2, 2, 2),
        patch_size: (2, 2, 1),
        depth: 1,
        embed_dim: 2,
        num_heads: 1,
        pyramid_levels: 1,
        seed: 0,
        precision: Precision::F64,
    };
    assert_eq!(config.num_positions(), 2);
    let mut params = ModelParams::<f64>::init(&config).unwrap();
    let b = &mut params.blocks[0];
    b.ln1.gamma = Array1::from(vec![1.1, 0.9]);
    b.ln1.beta = Array1::from(vec![0.05, -0.02]);
    b.wq.weight = ndarray::arr2(&[[0.3, -0.2], [0.15, 0.4]]);
    b.wq.bias = Array1::from(vec![0.01, -0.03]);
    b.wk.weight = ndarray::arr2(&[[-0.25, 0.12], [0.33, 0.08]]);
    b.wk.bias = Array1::from(vec![0.02, 0.0]);
    b.wv.weight = ndarray::arr2(&[[0.5, 0.1], [-0.2, 0.3]]);
    b.wv.bias = Array1::from(vec![0.0, 0.04]);
    b.wo.weight = ndarray::arr2(&[[0.27, -0.31], [0.18, 0.22]]);
    b.wo.bias = Array1::from(vec![-0.01, 0.02]);
    b.ln2.gamma = Array1::from(vec![0.95, 1.05]);
    b.ln2.beta = Array1::from(vec![0.0, 0.01]);
    b.w1.weight = ndarray::arr2(&[
        [0.2, -0.1],
        [0.3, 0.25],
        [-0.15, 0.05],
        [0.12, -0.22],
        [0.31, 0.07],
        [-0.09, 0.16],
        [0.21, 0.3],
        [-0.27, -0.11],
    ]);
    b.w1.bias = Array1::from(vec![0.01; 8]);
    b.w2.weight = ndarray::arr2(&[
        [0.1, -0.2, 0.05, 0.3, -0.12, 0.07, 0.22, -0.08],
        [-0.3, 0.15, 0.12, -0.05, 0.2, -0.18, 0.03, 0.25],
    ]);
    b.w2.bias = Array1::from(vec![0.02, -0.01]);

    let tokens = ndarray::arr2(&[[0.4, -0.7], [1.2, 0.3]]);
    let branch = emim::nn::encoder_forward(
        &params,
        tokens.clone(),
        1,
        FeatureSource::FullInput,
        Array2::zeros((2, config.patch_len())),
    )
    .unwrap();

    let to_vecs = |w: &Array2<f64>| -> Vec<Vec<f64>> {
        w.rows().into_iter().map(|r| r.to_vec()).collect()
    };
    let blk = &params.blocks[0];
    let oracle = naive_block(
        &[vec![0.4, -0.7], vec![1.2, 0.3]],
        (blk.ln1.gamma.as_slice().unwrap(), blk.ln1.beta.as_slice().unwrap()),
        (&to_vecs(&blk.wq.weight), blk.wq.bias.as_slice().unwrap()),
        (&to_vecs(&blk.wk.weight), blk.wk.bias.as_slice().unwrap()),
        (&to_vecs(&blk.wv.weight), blk.wv.bias.as_slice().unwrap()),
        (&to_vecs(&blk.wo.weight), blk.wo.bias.as_slice().unwrap()),
        (blk.ln2.gamma.as_slice().unwrap(), blk.ln2.beta.as_slice().unwrap()),
        (&to_vecs(&blk.w1.weight), blk.w1.bias.as_slice().unwrap()),
        (&to_vecs(&blk.w2.weight), blk.w2.bias.as_slice().unwrap()),
    );
    let got = branch.final_tokens();
    for i in 0..2 {
        for j in 0..2 {
            assert!(
                (got[(i, j)] - oracle[i][j]).abs() < 1e-12,
                "({i},{j}): {} vs {}",
                got[(i, j)],
                oracle[i][j]
            );
        }
    }
}

#[test]
fn empty_mask_makes_branches_identical() {
    let config = gradcheck_config();
    let params = ModelParams::<f64>::init(&config).unwrap();
    let volume = gradcheck_volume();
    let grid = partition(&volume, config.patch_size).unwrap();
    let mut rng = derive_rng(5, 0);
    let empty = random_mask(config.num_positions(), config.num_modalities, 0.0, &mut rng).unwrap();
    let dual = forward_dual(&params, &config, &grid, &empty).unwrap();
    for layer in 0..=config.depth {
        let a = dual.full.tokens_at(layer);
        let b = dual.masked.tokens_at(layer);
        assert_eq!(a, b, "branches diverge at layer {layer}");
    }
}

#[test]
fn full_branch_is_independent_of_the_mask() {
    let config = gradcheck_config();
    let params = ModelParams::<f64>::init(&config).unwrap();
    let volume = gradcheck_volume();
    let grid = partition(&volume, config.patch_size).unwrap();
    let mut rng = derive_rng(6, 0);
    let m1 = random_mask(config.num_positions(), config.num_modalities, 0.25, &mut rng).unwrap();
    let m2 = random_mask(config.num_positions(), config.num_modalities, 0.75, &mut rng).unwrap();
    let d1 = forward_dual(&params, &config, &grid, &m1).unwrap();
    let d2 = forward_dual(&params, &config, &grid, &m2).unwrap();
    assert_eq!(d1.full.final_tokens(), d2.full.final_tokens());
}

#[test]
fn reconstruction_has_volume_shape() {
    let config = gradcheck_config();
    let params = ModelParams::<f64>::init(&config).unwrap();
    let volume = gradcheck_volume();
    let grid = partition(&volume, config.patch_size).unwrap();
    let mut rng = derive_rng(7, 0);
    for ratio in [0.0, 0.5, 1.0] {
        let mask =
            random_mask(config.num_positions(), config.num_modalities, ratio, &mut rng).unwrap();
        let dual = forward_dual(&params, &config, &grid, &mask).unwrap();
        let (h, w, d) = config.dims;
        assert_eq!(dual.recon.dim(), (config.num_modalities, h, w, d));
    }
}

#[test]
fn identity_projection_over_zero_depth_encoder_reassembles_content() {
    // With no blocks, an identity-shaped output projection (W_out·W_embed
    // both permutation-free) cannot exist in general, but shapes must: the
    // reconstruction path must produce exactly one voxel per input voxel.
    let config = tiny_config(0, 4, 1);
    let params = ModelParams::<f64>::init(&config).unwrap();
    let volume = gradcheck_volume();
    let grid = partition(&volume, config.patch_size).unwrap();
    let x = patch_matrix::<f64>(&grid);
    assert_eq!(x.dim(), (config.num_positions(), config.patch_len()));
    let mut rng = derive_rng(8, 0);
    let mask = random_mask(config.num_positions(), config.num_modalities, 0.5, &mut rng).unwrap();
    let dual = forward_dual(&params, &config, &grid, &mask).unwrap();
    assert_eq!(dual.recon.len(), volume.data().len());
    // Round trip of the layout itself is exact: volume → tokens → volume.
    let tokens = patch_matrix::<f64>(&grid);
    let back = emim::nn::tokens_to_volume(&tokens, &config);
    for (a, b) in back.iter().zip(volume.data().iter()) {
        assert_eq!(*a, *b as f64);
    }
}

#[test]
fn forward_is_deterministic_per_seed() {
    let config = gradcheck_config();
    let params1 = ModelParams::<f64>::init(&config).unwrap();
    let params2 = ModelParams::<f64>::init(&config).unwrap();
    assert_eq!(params1, params2);
    let volume = gradcheck_volume();
    let grid = partition(&volume, config.patch_size).unwrap();
    let a = forward_full(&params1, &config, &grid).unwrap();
    let b = forward_full(&params2, &config, &grid).unwrap();
    assert_eq!(a.final_tokens(), b.final_tokens());
}

#[test]
fn shared_parameter_store_has_no_hidden_copies() {
    // Sentinel: perturbing one weight in the single store changes both
    // branches' outputs.
    let config = gradcheck_config();
    let mut params = ModelParams::<f64>::init(&config).unwrap();
    let volume = gradcheck_volume();
    let grid = partition(&volume, config.patch_size).unwrap();
    let mut rng = derive_rng(9, 0);
    let mask = random_mask(config.num_positions(), config.num_modalities, 0.5, &mut rng).unwrap();

    let before = forward_dual(&params, &config, &grid, &mask).unwrap();
    params.blocks[0].wv.weight[(0, 0)] += 0.5;
    let after = forward_dual(&params, &config, &grid, &mask).unwrap();
    let full_moved = (after.full.final_tokens() - before.full.final_tokens())
        .mapv(f64::abs)
        .sum();
    let masked_moved = (after.masked.final_tokens() - before.masked.final_tokens())
        .mapv(f64::abs)
        .sum();
    assert!(full_moved > 0.0, "full branch ignored the sentinel");
    assert!(masked_moved > 0.0, "masked branch ignored the sentinel");
}

#[test]
fn f32_mode_is_deterministic_and_close_to_f64() {
    let config = EncoderConfig {
        precision: Precision::F32,
        ..gradcheck_config()
    };
    let p32a = ModelParams::<f32>::init(&config).unwrap();
    let p32b = ModelParams::<f32>::init(&config).unwrap();
    assert_eq!(p32a, p32b);
    let volume = gradcheck_volume();
    let grid = partition(&volume, config.patch_size).unwrap();
    let a = forward_full(&p32a, &config, &grid).unwrap();
    let b = forward_full(&p32b, &config, &grid).unwrap();
    assert_eq!(a.final_tokens(), b.final_tokens());

    let p64 = p32a.convert::<f64>();
    let c = forward_full(&p64, &config, &grid).unwrap();
    for (x, y) in a.final_tokens().iter().zip(c.final_tokens().iter()) {
        assert!((*x as f64 - *y).abs() < 1e-4);
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let config = gradcheck_config();
    let params = ModelParams::<f64>::init(&config).unwrap();
    let path = dir.path().join("model.emim");
    save_checkpoint(&params, &config, &path).unwrap();
    let (loaded_config, loaded) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded_config, config);
    assert_eq!(loaded, params);
}

#[test]
fn checkpoint_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let config = gradcheck_config();
    let params = ModelParams::<f64>::init(&config).unwrap();
    let path = dir.path().join("model.emim");
    save_checkpoint(&params, &config, &path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let bad_magic = {
        let mut b = bytes.clone();
        b[0] = b'X';
        b
    };
    let bad_path = dir.path().join("bad.emim");
    std::fs::write(&bad_path, bad_magic).unwrap();
    assert!(matches!(
        load_checkpoint(&bad_path),
        Err(Error::BadMagic { .. })
    ));

    let truncated = &bytes[..bytes.len() - 9];
    std::fs::write(&bad_path, truncated).unwrap();
    assert!(matches!(
        load_checkpoint(&bad_path),
        Err(Error::TruncatedPayload { .. })
    ));
}

#[test]
fn checkpoint_validates_shapes_against_config() {
    // A checkpoint whose config declares a different width than its tensors
    // must be rejected with the tensor named.
    let dir = tempfile::tempdir().unwrap();
    let config = gradcheck_config();
    let params = ModelParams::<f64>::init(&config).unwrap();
    let path = dir.path().join("model.emim");
    save_checkpoint(&params, &config, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    // Bump embed_dim in the config text (4 → 8); tensor payloads stay.
    let text_start = 8;
    let config_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let text = String::from_utf8(bytes[text_start..text_start + config_len].to_vec()).unwrap();
    let patched = text.replace("model.embed_dim=4", "model.embed_dim=8");
    assert_ne!(text, patched);
    bytes.splice(text_start..text_start + config_len, patched.into_bytes());
    let hacked = dir.path().join("hacked.emim");
    std::fs::write(&hacked, &bytes).unwrap();
    match load_checkpoint(&hacked) {
        Err(Error::ShapeMismatch(msg)) => assert!(msg.contains('`'), "message: {msg}"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn nonfinite_activations_name_the_block() {
    let config = tiny_config(2, 4, 1);
    let mut params = ModelParams::<f64>::init(&config).unwrap();
    params.blocks[1].w2.weight.fill(f64::INFINITY);
    let volume = gradcheck_volume();
    let grid = partition(&volume, config.patch_size).unwrap();
    match forward_full(&params, &config, &grid) {
        Err(Error::NonFinite(what)) => assert!(what.contains("block 1"), "got {what}"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}
