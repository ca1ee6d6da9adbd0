//! The controller head: one hidden ReLU layer over the encoded state,
//! legal-action masking, tempered softmax, sampling and trajectory
//! log-probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderCache, EncoderParams, StateFeatures};
use crate::error::{Error, Result};
use crate::optim::{GradSet, NamedTensor, ParamSet, TensorSet, PARAM_NAMES, W1, W2, W_IMAGE, W_MEMORY, W_QUERY};
use crate::supernet::{ActionId, Position, ToolOutput};
use crate::tensor::{dot, Matrix};

/// Logit assigned to illegal actions before the softmax.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_dim: usize,
    pub text_dim: usize,
    pub memory_dim: usize,
    pub image_out: usize,
    pub query_out: usize,
    pub memory_out: usize,
    pub hidden: usize,
    pub num_actions: usize,
}

impl ModelConfig {
    pub fn standard(num_actions: usize) -> Self {
        Self {
            image_dim: encoder::FEATURE_DIM,
            text_dim: encoder::FEATURE_DIM,
            memory_dim: encoder::FEATURE_DIM,
            image_out: encoder::IMAGE_OUT,
            query_out: encoder::QUERY_OUT,
            memory_out: encoder::MEMORY_OUT,
            hidden: 256,
            num_actions,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.image_out + self.query_out + self.memory_out
    }

    pub fn of_params(params: &ParamSet) -> Self {
        Self {
            image_dim: params.at(W_IMAGE).cols,
            text_dim: params.at(W_QUERY).cols,
            memory_dim: params.at(W_MEMORY).cols,
            image_out: params.at(W_IMAGE).rows,
            query_out: params.at(W_QUERY).rows,
            memory_out: params.at(W_MEMORY).rows,
            hidden: params.at(W1).rows,
            num_actions: params.at(W2).rows,
        }
    }
}

/// Fresh parameters: uniform ±1/√fan_in for every matrix.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [
        (cfg.image_out, cfg.image_dim),
        (cfg.query_out, cfg.text_dim),
        (cfg.memory_out, cfg.memory_dim),
        (cfg.hidden, cfg.state_dim()),
        (cfg.num_actions, cfg.hidden),
    ];
    TensorSet::new(
        PARAM_NAMES
            .iter()
            .zip(shapes)
            .map(|(name, (r, c))| NamedTensor {
                name: name.to_string(),
                value: encoder::init_projection(r, c, &mut rng),
            })
            .collect(),
    )
}

pub fn encoder_params(params: &ParamSet) -> EncoderParams<'_> {
    EncoderParams {
        w_image: params.at(W_IMAGE),
        w_query: params.at(W_QUERY),
        w_memory: params.at(W_MEMORY),
    }
}

/// Borrowed view of the head weights.
#[derive(Clone, Copy, Debug)]
pub struct PolicyHead<'a> {
    pub w1: &'a Matrix,
    pub w2: &'a Matrix,
}

impl<'a> PolicyHead<'a> {
    pub fn of(params: &'a ParamSet) -> Self {
        Self {
            w1: params.at(W1),
            w2: params.at(W2),
        }
    }
}

/// Linear temperature annealing, clamped at `end` after `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl TemperatureSchedule {
    pub fn new(total_steps: u64) -> Self {
        Self {
            start: 2.0,
            end: 0.8,
            total_steps,
        }
    }
}

pub fn temperature(step: u64, sched: &TemperatureSchedule) -> f64 {
    if sched.total_steps == 0 || step >= sched.total_steps {
        return sched.end;
    }
    let frac = step as f64 / sched.total_steps as f64;
    sched.start + (sched.end - sched.start) * frac
}

/// Masked categorical distribution at one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    /// Legal actions in graph order.
    pub actions: Vec<ActionId>,
    /// Probabilities aligned with `actions`.
    pub probs: Vec<f64>,
    /// Raw head outputs over the whole action index.
    pub logits: Vec<f64>,
    pub mask: Vec<bool>,
    pub alpha: f64,
}

impl ActionDistribution {
    pub fn index_of(&self, a: ActionId) -> Option<usize> {
        self.actions.iter().position(|&x| x == a)
    }

    pub fn prob(&self, a: ActionId) -> f64 {
        self.index_of(a).map(|i| self.probs[i]).unwrap_or(0.0)
    }

    /// Probabilities over the whole action index (exact zeros off-mask).
    pub fn full_probs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.mask.len()];
        for (a, p) in self.actions.iter().zip(&self.probs) {
            out[a.0] = *p;
        }
        out
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    pub fn argmax(&self) -> ActionId {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        self.actions[best]
    }

    /// ∂ log p(chosen) / ∂ logit over the legal set.
    pub fn dlogp_dlogits(&self, chosen: usize) -> Vec<f64> {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| (if i == chosen { 1.0 } else { 0.0 } - p) / self.alpha)
            .collect()
    }

    /// Deterministic choice of `chosen` among `legal`, for scripted rollouts.
    pub fn point_mass(legal: &[ActionId], chosen: ActionId, num_actions: usize) -> Self {
        let mut mask = vec![false; num_actions];
        for a in legal {
            mask[a.0] = true;
        }
        Self {
            actions: legal.to_vec(),
            probs: legal.iter().map(|&a| if a == chosen { 1.0 } else { 0.0 }).collect(),
            logits: vec![0.0; num_actions],
            mask,
            alpha: 1.0,
        }
    }

    /// ∂ H / ∂ logit over the legal set.
    pub fn dentropy_dlogits(&self) -> Vec<f64> {
        let h = self.entropy();
        self.probs
            .iter()
            .map(|&p| if p > 0.0 { -p * (p.ln() + h) / self.alpha } else { 0.0 })
            .collect()
    }
}

/// `Softmax(mask[W₂ σ(W₁ h)] / α)` over the legal set.
pub fn action_distribution(h: &[f64], legal: &[ActionId], head: PolicyHead<'_>, alpha: f64) -> ActionDistribution {
    let u = head.w1.matvec(h);
    let r: Vec<f64> = u.iter().map(|&v| v.max(0.0)).collect();
    distribution_from_hidden(&r, legal, head.w2, alpha)
}

fn distribution_from_hidden(r: &[f64], legal: &[ActionId], w2: &Matrix, alpha: f64) -> ActionDistribution {
    assert!(alpha > 0.0, "temperature must be positive");
    assert!(!legal.is_empty(), "legal action set must be non-empty");
    let n = w2.rows;
    let mut mask = vec![false; n];
    for a in legal {
        mask[a.0] = true;
    }
    let logits: Vec<f64> = (0..n).map(|i| if mask[i] { dot(w2.row(i), r) } else { 0.0 }).collect();
    let scaled: Vec<f64> = (0..n)
        .map(|i| if mask[i] { logits[i] } else { MASK_VALUE } / alpha)
        .collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut probs: Vec<f64> = legal.iter().map(|a| exps[a.0] / z).collect();
    // mass off the mask underflows to zero unless the logits have blown up
    let off_mask: f64 = (0..n).filter(|&i| !mask[i]).map(|i| exps[i]).sum();
    if off_mask != 0.0 {
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
    }
    ActionDistribution {
        actions: legal.to_vec(),
        probs,
        logits,
        mask,
        alpha,
    }
}

/// Forward values needed for backpropagation through one decision.
#[derive(Clone, Debug)]
pub struct StepForward {
    pub enc: EncoderCache,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub dist: ActionDistribution,
}

pub fn forward(params: &ParamSet, features: &StateFeatures, legal: &[ActionId], alpha: f64) -> Result<StepForward> {
    let enc = encoder::encode_features(features, &encoder_params(params))?;
    let w1 = params.at(W1);
    if w1.cols != enc.h.len() {
        return Err(Error::DimensionMismatch {
            what: "policy hidden layer",
            expected: w1.cols,
            got: enc.h.len(),
        });
    }
    let hidden_pre = w1.matvec(&enc.h);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    let dist = distribution_from_hidden(&hidden, legal, params.at(W2), alpha);
    Ok(StepForward {
        enc,
        hidden_pre,
        hidden,
        dist,
    })
}

/// Accumulate `∂L/∂θ` given `∂L/∂logits` over the legal set.
pub fn backward(params: &ParamSet, features: &StateFeatures, fwd: &StepForward, g_logits: &[f64], grads: &mut GradSet) {
    let w2 = params.at(W2);
    let mut g_hidden = vec![0.0; w2.cols];
    for (a, &g) in fwd.dist.actions.iter().zip(g_logits) {
        if g != 0.0 {
            crate::tensor::axpy(g, &fwd.hidden, grads.at_mut(W2).row_mut(a.0));
            crate::tensor::axpy(g, w2.row(a.0), &mut g_hidden);
        }
    }
    for (g, &u) in g_hidden.iter_mut().zip(&fwd.hidden_pre) {
        if u <= 0.0 {
            *g = 0.0;
        }
    }
    grads.at_mut(W1).add_outer(1.0, &g_hidden, &fwd.enc.h);
    let mut g_h = vec![0.0; fwd.enc.h.len()];
    params.at(W1).matvec_t_acc(&g_hidden, &mut g_h);
    let (head, tail) = grads.tensors.split_at_mut(W1);
    let [gi, gq, gm] = head else { unreachable!() };
    let _ = tail;
    encoder::encoder_backward(&fwd.enc, &g_h, features, &mut gi.value, &mut gq.value, &mut gm.value);
}

/// Inverse-CDF draw over the ordered legal set.
pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> ActionId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, p) in dist.actions.iter().zip(&dist.probs) {
        acc += p;
        if u < acc {
            return *a;
        }
    }
    // rounding: fall back to the last action with mass
    dist.actions
        .iter()
        .zip(&dist.probs)
        .rev()
        .find(|(_, &p)| p > 0.0)
        .map(|(a, _)| *a)
        .expect("distribution has support")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    EarlyExit,
    MaxSteps,
}

#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub position: Position,
    pub features: StateFeatures,
    pub state_digest: String,
    pub dist: ActionDistribution,
    pub action: ActionId,
    pub output: Option<ToolOutput>,
    /// Routing or tool error that degraded this step, if any.
    pub degraded: Option<String>,
    /// The invoked tool needed forwarded context and received none.
    pub context_missing: bool,
}

impl TrajectoryStep {
    pub fn chosen_index(&self) -> usize {
        self.dist.index_of(self.action).expect("chosen action is legal")
    }
}

/// Ordered decisions of one rollout. An EarlyExit, if present, is last.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub terminated_by: Termination,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<ActionId> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Number of tool invocations (EarlyExit excluded).
    pub fn num_invocations(&self) -> usize {
        self.steps.iter().filter(|s| s.output.is_some() || s.degraded.is_some()).count()
    }
}

/// `Σ_t log π(a_t | s_t)` from the stored per-step distributions.
pub fn trajectory_logprob(traj: &Trajectory) -> Result<f64> {
    let mut total = 0.0;
    for (t, s) in traj.steps.iter().enumerate() {
        let p = s.dist.prob(s.action);
        if p <= 0.0 {
            return Err(Error::ZeroProbabilityAction { step: t });
        }
        total += p.ln();
    }
    Ok(total)
}
