use std::f64::consts::PI;

use super::tensor::Tensor;
use crate::error::{DinError, Result};

/// Result of asking an optimizer to step a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepStatus {
    Applied,
    /// The group was frozen; parameters were left untouched.
    SkippedFrozen,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub steps: u64,
}

/// Named set of tensors that is frozen, stepped and checkpointed as a unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGroup {
    pub name: String,
    pub tensors: Vec<Tensor>,
    pub frozen: bool,
    pub adam: Option<AdamState>,
    /// Number of optimizer calls rejected because the group was frozen.
    pub frozen_step_attempts: usize,
}

impl ParameterGroup {
    pub fn new(name: impl Into<String>, tensors: Vec<Tensor>) -> Self {
        Self {
            name: name.into(),
            tensors,
            frozen: false,
            adam: None,
            frozen_step_attempts: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bit_eq(&self, other: &ParameterGroup) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }

    fn reject_if_frozen(&mut self) -> Option<StepStatus> {
        if self.frozen {
            self.frozen_step_attempts += 1;
            Some(StepStatus::SkippedFrozen)
        } else {
            None
        }
    }
}

/// `θ ← θ − lr·(grad + weight_decay·θ)`, then clears gradients.
pub fn step_sgd(group: &mut ParameterGroup, lr: f64, weight_decay: f64) -> StepStatus {
    if let Some(s) = group.reject_if_frozen() {
        return s;
    }
    for t in &mut group.tensors {
        let grad = t.grad().map(<[f64]>::to_vec);
        let data = t.data_mut();
        match grad {
            Some(g) => data
                .iter_mut()
                .zip(g)
                .for_each(|(p, gv)| *p -= lr * (gv + weight_decay * *p)),
            None if weight_decay != 0.0 => data.iter_mut().for_each(|p| *p -= lr * weight_decay * *p),
            None => {}
        }
        t.clear_grad();
    }
    StepStatus::Applied
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected Adam step with decoupled weight decay; clears gradients.
/// A missing gradient counts as zero.
pub fn step_adamw(group: &mut ParameterGroup, lr: f64, cfg: &AdamWConfig) -> StepStatus {
    if let Some(s) = group.reject_if_frozen() {
        return s;
    }
    let state = group.adam.get_or_insert_with(|| AdamState {
        first: group.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        second: group.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        steps: 0,
    });
    state.steps += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.steps as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.steps as i32);
    for ((t, m), v) in group
        .tensors
        .iter_mut()
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for (((p, g), mi), vi) in t.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            if cfg.weight_decay != 0.0 {
                *p -= lr * cfg.weight_decay * *p;
            }
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        t.clear_grad();
    }
    StepStatus::Applied
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at the
/// final epoch.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize, warmup_epochs: usize) -> Result<f64> {
    if warmup_epochs >= total_epochs {
        return Err(DinError::Config(format!(
            "warmup_epochs ({warmup_epochs}) must be below total_epochs ({total_epochs})"
        )));
    }
    if epoch >= total_epochs {
        return Err(DinError::Config(format!(
            "epoch {epoch} outside schedule of {total_epochs} epochs"
        )));
    }
    if epoch < warmup_epochs {
        return Ok(base_lr * epoch as f64 / warmup_epochs as f64);
    }
    let span = total_epochs - warmup_epochs - 1;
    let progress = if span == 0 {
        0.0
    } else {
        (epoch - warmup_epochs) as f64 / span as f64
    };
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}
