//! Pretraining loop, evaluation logging, linear probing, and ablations.
//!
//! A run is fully determined by its configuration: batches cycle through the
//! dataset in order, per-sample masks come from seed streams derived from
//! `(seed, step, sample)`, and gradient reduction is order-fixed, so two runs
//! with one configuration produce byte-identical logs and checkpoints for
//! any thread count.

mod ablate;
mod optimizer;
mod probe;

pub use ablate::{ablation_csv, ablate, default_ablation_grid, AblationRow};
pub use optimizer::{adam_step, lr_at_step, AdamHyper, AdamState};
pub use probe::{generate_lesion_probe_set, linear_probe, LabeledDataset, ProbeConfig, ProbeOutcome};

use rand::Rng;
use rayon::prelude::*;

use crate::diagnostics::{collapse_report, CollapseOptions, DEFAULT_CONVERGENCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::losses::objective;
use crate::masking::MaskStrategy;
use crate::nn::{EncoderConfig, FeatureSource, ModelParams, Scalar};
use crate::rng::derive_rng;
use crate::volume::Dataset;

/// Seed-stream bases; keep mask, eval, and probe draws disjoint.
const MASK_STREAM: u64 = 1 << 40;
const EVAL_STREAM: u64 = 2 << 40;

/// Number of leading singular values logged per evaluation row.
pub const TOP_SIGMA_K: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mask: MaskStrategy,
    pub pbt_enabled: bool,
    pub encoder: EncoderConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Defaults to 10% of `total_steps` when `None`.
    pub warmup_steps: Option<usize>,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Steps between collapse reports.
    pub eval_every: usize,
    pub seed: u64,
    /// Loss level separating collapsed from normally converged runs.
    pub convergence_threshold: f64,
    /// Volumes per collapse report.
    pub probe_size: usize,
    /// Monte Carlo draws per collapse report.
    pub eval_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask: MaskStrategy::Random { ratio: 0.5 },
            pbt_enabled: false,
            encoder: EncoderConfig::default(),
            learning_rate: 3e-4,
            weight_decay: 0.05,
            warmup_steps: None,
            batch_size: 8,
            total_steps: 2000,
            eval_every: 100,
            seed: 42,
            convergence_threshold: DEFAULT_CONVERGENCE_THRESHOLD,
            probe_size: 8,
            eval_draws: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(Error::Config("learning_rate must be finite".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be >= 1".into()));
        }
        if self.probe_size < 2 {
            return Err(Error::Config("probe_size must be >= 2".into()));
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 10)
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub l_mim: f64,
    pub l_pbt_total: f64,
    pub l_overall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub var_mean: f64,
    pub var_std_error: f64,
    pub trivial_score: f64,
    pub effective_rank: f64,
    /// Exactly [`TOP_SIGMA_K`] values, zero-padded.
    pub top_sigma: Vec<f64>,
}

/// Per-step and per-eval rows of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
}

impl RunLog {
    pub fn train_csv(&self) -> String {
        let mut out = String::from("step,l_mim,l_pbt_total,l_overall\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.l_mim, r.l_pbt_total, r.l_overall
            ));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::from("step,var_mean,var_std_error,trivial_score,effective_rank");
        for i in 0..TOP_SIGMA_K {
            out.push_str(&format!(",sigma_{i}"));
        }
        out.push('\n');
        for r in &self.evals {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.step, r.var_mean, r.var_std_error, r.trivial_score, r.effective_rank
            ));
            for s in &r.top_sigma {
                out.push_str(&format!(",{s}"));
            }
            out.push('\n');
        }
        out
    }
}

/// A finished pretraining run.
#[derive(Debug, Clone)]
pub struct TrainedRun<S: Scalar> {
    pub params: ModelParams<S>,
    pub log: RunLog,
}

fn eval_row<S: Scalar>(
    step: usize,
    params: &ModelParams<S>,
    config: &TrainConfig,
    dataset: &Dataset,
) -> Result<EvalRow> {
    let report = collapse_report(
        params,
        &config.encoder,
        &dataset.volumes,
        &config.mask,
        &CollapseOptions {
            probe_size: config.probe_size.min(dataset.volumes.len()),
            num_draws: config.eval_draws,
            seed: derive_rng(config.seed, EVAL_STREAM + step as u64).random(),
            feature_source: FeatureSource::MaskedInput,
            feature_level: None,
        },
    )?;
    let mut top_sigma: Vec<f64> = report.singular_values.iter().take(TOP_SIGMA_K).copied().collect();
    top_sigma.resize(TOP_SIGMA_K, 0.0);
    Ok(EvalRow {
        step,
        var_mean: report.variance.mean_var,
        var_std_error: report.variance.std_error,
        trivial_score: report.trivial.score,
        effective_rank: report.effective_rank,
        top_sigma,
    })
}

/// Runs the pretraining loop: dual forward, joint loss (reconstruction plus
/// pyramid uniformity when enabled), exact backward, Adam with warmup/cosine
/// schedule; a collapse report every `eval_every` steps and after the final
/// step. Aborts with the offending step on a non-finite loss.
pub fn pretrain<S: Scalar>(config: &TrainConfig, dataset: &Dataset) -> Result<TrainedRun<S>> {
    config.validate()?;
    let encoder = &config.encoder;
    let first = dataset.volumes.first().ok_or(Error::EmptyDataset)?;
    if first.num_modalities() != encoder.num_modalities || first.dims() != encoder.dims {
        return Err(Error::ShapeMismatch(format!(
            "dataset volumes are {}x{:?}, encoder expects {}x{:?}",
            first.num_modalities(),
            first.dims(),
            encoder.num_modalities,
            encoder.dims
        )));
    }

    let mut params = ModelParams::<S>::init(encoder)?;
    let mut state = AdamState::new(&params);
    let hyper = config.hyper();
    let mut log = RunLog::default();
    let n = encoder.num_positions();
    let num_volumes = dataset.volumes.len();

    for step in 0..config.total_steps {
        if step % config.eval_every == 0 {
            log.evals.push(eval_row(step, &params, config, dataset)?);
        }

        let results: Vec<Result<(f64, f64, f64, ModelParams<S>)>> = (0..config.batch_size)
            .into_par_iter()
            .map(|j| {
                let global = (step * config.batch_size + j) as u64;
                let mut rng = derive_rng(config.seed, MASK_STREAM + global);
                let volume = &dataset.volumes[(step * config.batch_size + j) % num_volumes];
                let mask = config.mask.generate(n, encoder.num_modalities, &mut rng)?;
                let out = objective(&params, encoder, volume, &mask, config.pbt_enabled, true)?;
                Ok((
                    out.breakdown.l_mim,
                    out.breakdown.l_pbt_total,
                    out.breakdown.l_overall,
                    out.grads.expect("gradients requested"),
                ))
            })
            .collect();

        let mut grads = params.zeros_like();
        let (mut l_mim, mut l_pbt, mut l_overall) = (0.0, 0.0, 0.0);
        for result in results {
            let (mim, pbt, overall, g) = result?;
            l_mim += mim;
            l_pbt += pbt;
            l_overall += overall;
            grads.add_scaled(&g, S::one());
        }
        let inv_b = 1.0 / config.batch_size as f64;
        grads.scale(S::from_f64(inv_b));
        l_mim *= inv_b;
        l_pbt *= inv_b;
        l_overall *= inv_b;
        if !l_overall.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                what: "non-finite batch loss".into(),
            });
        }
        log.steps.push(StepRow {
            step,
            l_mim,
            l_pbt_total: l_pbt,
            l_overall,
        });

        let lr = lr_at_step(step, config.total_steps, config.learning_rate, config.warmup());
        adam_step(&mut params, &grads, &mut state, &hyper, lr);
    }
    log.evals
        .push(eval_row(config.total_steps, &params, config, dataset)?);

    Ok(TrainedRun { params, log })
}

/// Expected masked reconstruction loss of a trained model over fresh
/// (volume, mask) draws; the quantity the collapsed-loss bound refers to.
pub fn expected_masked_loss<S: Scalar>(
    params: &ModelParams<S>,
    encoder: &EncoderConfig,
    volumes: &[crate::volume::MultiModalVolume],
    strategy: &MaskStrategy,
    num_draws: usize,
    seed: u64,
) -> Result<f64> {
    if volumes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = encoder.num_positions();
    let values: Vec<f64> = (0..num_draws as u64)
        .into_par_iter()
        .map(|draw| {
            let mut rng = derive_rng(seed, draw);
            let volume = &volumes[rng.random_range(0..volumes.len())];
            let mask = strategy.generate(n, encoder.num_modalities, &mut rng)?;
            let out = objective(params, encoder, volume, &mask, false, false)?;
            Ok(out.breakdown.l_mim)
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / num_draws as f64)
}
