//! Parameter storage, gradient plumbing and AdamW with global-norm clipping
//! and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const W_IMAGE: usize = 0;
pub const W_QUERY: usize = 1;
pub const W_MEMORY: usize = 2;
pub const W1: usize = 3;
pub const W2: usize = 4;
pub const PARAM_NAMES: [&str; 5] = ["w_image", "w_query", "w_memory", "w1", "w2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

/// Ordered named tensors. Used both for parameters and for their gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSet {
    pub tensors: Vec<NamedTensor>,
}

pub type ParamSet = TensorSet;
pub type GradSet = TensorSet;

impl TensorSet {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(other: &TensorSet) -> Self {
        Self {
            tensors: other
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    value: Matrix::zeros(t.value.rows, t.value.cols),
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    #[inline]
    pub fn at(&self, i: usize) -> &Matrix {
        &self.tensors[i].value
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.tensors[i].value
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.value.data.len()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.value.frobenius_sq()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.data.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.value.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &TensorSet, s: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            crate::tensor::axpy(s, &b.value.data, &mut a.value.data);
        }
    }

    pub fn same_shape(&self, other: &TensorSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name && a.value.rows == b.value.rows && a.value.cols == b.value.cols
            })
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        crate::util::f64s_to_bytes(&self.tensors.iter().flat_map(|t| t.value.data.iter().copied()).collect::<Vec<_>>())
    }
}

/// A differentiable scalar function of the parameters.
pub trait Objective {
    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradSet)>;

    fn loss(&self, params: &ParamSet) -> Result<f64> {
        self.loss_and_grad(params).map(|(l, _)| l)
    }
}

/// Exact gradient of `objective` at `params`.
pub fn grad(objective: &dyn Objective, params: &ParamSet) -> Result<GradSet> {
    let (loss, g) = objective.loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(loss));
    }
    Ok(g)
}

/// Scale all gradients by `max_norm / g` when the global L2 norm `g` exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// `base · ½(1 + cos(π · step / total))`, clamped to the horizon.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub first_moment: TensorSet,
    pub second_moment: TensorSet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        Self {
            config,
            first_moment: TensorSet::zeros_like(params),
            second_moment: TensorSet::zeros_like(params),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction.
pub fn adamw_step(params: &mut ParamSet, grads: &GradSet, state: &mut OptimizerState, lr: f64) {
    debug_assert!(params.same_shape(grads) && params.same_shape(&state.first_moment));
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.first_moment.tensors)
        .zip(&mut state.second_moment.tensors)
    {
        for (((pi, &gi), mi), vi) in p
            .value
            .data
            .iter_mut()
            .zip(&g.value.data)
            .zip(m.value.data.iter_mut())
            .zip(v.value.data.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi = *pi * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
