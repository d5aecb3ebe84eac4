//! Adam with decoupled weight decay, plus the warmup/cosine schedule.

use crate::nn::{ModelParams, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment estimates, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: ModelParams<S>,
    v: ModelParams<S>,
    step: usize,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One bias-corrected update at step-size `lr_now`; weight decay is
/// decoupled (applied directly to the parameters, not the moments).
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &ModelParams<S>,
    state: &mut AdamState<S>,
    hyper: &AdamHyper,
    lr_now: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(hyper.beta1);
    let b2 = S::from_f64(hyper.beta2);
    let one = S::one();
    let eps = S::from_f64(hyper.epsilon);
    let lr = S::from_f64(lr_now);
    let corr1 = S::from_f64(1.0 - hyper.beta1.powi(t));
    let corr2 = S::from_f64(1.0 - hyper.beta2.powi(t));
    let decay = S::from_f64(lr_now * hyper.weight_decay);

    let mut p_t = params.named_mut();
    let g_t = grads.named();
    let mut m_t = state.m.named_mut();
    let mut v_t = state.v.named_mut();
    for i in 0..p_t.len() {
        let p = p_t[i].1.as_mut_slice();
        let g = g_t[i].1.as_slice();
        let m = m_t[i].1.as_mut_slice();
        let v = v_t[i].1.as_mut_slice();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps) - decay * p[j];
        }
    }
}

/// Learning rate at 0-based `step`: linear warmup over `warmup_steps`, then
/// cosine decay to zero at `total_steps`.
///
/// ```text
/// lr(t) = base · (t + 1) / W                         for t < W
/// lr(t) = base · ½ · (1 + cos(π · (t − W)/(T − W)))  for W ≤ t < T
/// ```
pub fn lr_at_step(step: usize, total_steps: usize, base: f64, warmup_steps: usize) -> f64 {
    let w = warmup_steps.min(total_steps);
    if step < w {
        return base * (step + 1) as f64 / w as f64;
    }
    if total_steps <= w {
        return base;
    }
    let progress = (step - w) as f64 / (total_steps - w) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
