//! The masking-strategy × uniformity-loss ablation grid.

use super::{expected_masked_loss, linear_probe, pretrain, LabeledDataset, ProbeConfig, TrainConfig};
use crate::diagnostics::{collapse_report, CollapseOptions};
use crate::error::Result;
use crate::masking::{HmpConfig, MaskStrategy};
use crate::nn::Scalar;
use crate::volume::Dataset;

/// Final metrics of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mask: String,
    pub pbt: bool,
    pub final_l_mim: f64,
    pub var_mean: f64,
    pub trivial_score: f64,
    pub effective_rank: f64,
    pub probe_accuracy: f64,
}

/// The 2×2 grid `{random, hmp} × {pbt off, pbt on}`, varying only those two
/// axes of `base`.
pub fn default_ablation_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    let mut grid = Vec::with_capacity(4);
    for mask in [
        MaskStrategy::Random { ratio: 0.5 },
        MaskStrategy::Hmp(HmpConfig::default()),
    ] {
        for pbt_enabled in [false, true] {
            grid.push(TrainConfig {
                mask: mask.clone(),
                pbt_enabled,
                ..base.clone()
            });
        }
    }
    grid
}

/// Trains every configuration and tabulates final reconstruction loss,
/// masked-view variance, trivial-solution score, effective rank, and linear
/// probe accuracy. Identical configurations produce identical rows.
pub fn ablate<S: Scalar>(
    configs: &[TrainConfig],
    dataset: &Dataset,
    probe_set: &LabeledDataset,
    final_loss_draws: usize,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let run = pretrain::<S>(config, dataset)?;
        let report = collapse_report(
            &run.params,
            &config.encoder,
            &dataset.volumes,
            &config.mask,
            &CollapseOptions {
                probe_size: config.probe_size.min(dataset.volumes.len()),
                num_draws: config.eval_draws,
                seed: config.seed,
                ..CollapseOptions::default()
            },
        )?;
        let final_l_mim = expected_masked_loss(
            &run.params,
            &config.encoder,
            &dataset.volumes,
            &config.mask,
            final_loss_draws,
            config.seed ^ 0xab1a,
        )?;
        let probe = linear_probe(&run.params, &config.encoder, probe_set, &ProbeConfig::default())?;
        rows.push(AblationRow {
            mask: config.mask.kind().to_string(),
            pbt: config.pbt_enabled,
            final_l_mim,
            var_mean: report.variance.mean_var,
            trivial_score: report.trivial.score,
            effective_rank: report.effective_rank,
            probe_accuracy: probe.accuracy,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("mask,pbt,final_l_mim,var_mean,trivial_score,effective_rank,probe_accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.mask, r.pbt, r.final_l_mim, r.var_mean, r.trivial_score, r.effective_rank, r.probe_accuracy
        ));
    }
    out
}
