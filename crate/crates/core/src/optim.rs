//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter overrides applied on top of [`AdamConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRule {
    pub lr: f64,
    pub weight_decay: f64,
    /// Projection interval applied after the update.
    pub clamp: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN/Inf; nothing was changed.
    SkippedNonFinite,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    skipped: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new(), skipped: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped
    }

    pub fn default_rule(&self) -> UpdateRule {
        UpdateRule { lr: self.config.lr, weight_decay: self.config.weight_decay, clamp: None }
    }
}

/// One Adam update of every parameter that requires grad.
///
/// Parameters with `requires_grad == false` are left untouched. A
/// parameter that requires grad but received none is updated as if its
/// gradient were zero.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    rules: &[UpdateRule],
    state: &mut OptimizerState,
) -> Result<StepOutcome> {
    if rules.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} update rules for {} parameters",
            rules.len(),
            params.len()
        )));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len()
        || state.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
    {
        return Err(Error::InvalidArgument("optimizer moments do not match parameters".into()));
    }
    let finite = params
        .iter()
        .filter(|p| p.requires_grad)
        .all(|p| p.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
    if !finite {
        state.skipped += 1;
        log::warn!("non-finite gradient, skipping optimizer step {}", state.step + 1);
        return Ok(StepOutcome::SkippedNonFinite);
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let rule = rules[i];
        let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad[j] * grad[j];
            let update = (m[j] / bias1) / ((v[j] / bias2).sqrt() + c.eps);
            data[j] -= rule.lr * (update + rule.weight_decay * data[j]);
            if let Some((lo, hi)) = rule.clamp {
                data[j] = data[j].clamp(lo, hi);
            }
        }
    }
    Ok(StepOutcome::Applied)
}
