//! The three-phase curriculum: behavior cloning on expert decisions,
//! contrastive path ranking over sampled workflows, and cost-aware REINFORCE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{State, StateFeatures};
use crate::environment::scoring::{heuristic_reward, utility, HeuristicSpec};
use crate::environment::{expert_choices, CostWeights, Environment, QueryInstance};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, clip_global_norm, cosine_lr, AdamWConfig, GradSet, Objective, OptimizerState, ParamSet};
use crate::policy::{self, init_params, temperature, ActionDistribution, ModelConfig, TemperatureSchedule, Trajectory};
use crate::runtime::{entropy_of, estimate_marginal, rollout, Episode, RolloutOptions};
use crate::supernet::ActionId;
use crate::util::derived_rng;

/// One expert decision `(s, a★)`. `optimal` lists every action the expert
/// was indifferent among; `action` is the one it took.
#[derive(Clone, Debug)]
pub struct ExpertPair {
    pub state: State,
    pub features: StateFeatures,
    pub legal: Vec<ActionId>,
    pub action: ActionId,
    pub optimal: Vec<ActionId>,
}

/// Roll the scripted expert through `instance`, returning its decisions and
/// the executed trajectory. Ties among optimal actions are broken uniformly
/// with a generator derived from the instance seed. When `opts` masks every
/// action the expert would take, the demonstration ends early.
pub fn expert_rollout(
    env: &Environment,
    instance: &QueryInstance,
    opts: &RolloutOptions,
) -> Result<(Vec<ExpertPair>, Trajectory)> {
    let mut ep = Episode::new(env, instance);
    let mut pairs = Vec::new();
    let mut rng = derived_rng(instance.seed, "expert", 0);
    while !ep.is_done() {
        let legal = ep.legal_actions(opts)?;
        let mut optimal = expert_choices(&env.graph, ep.state(), instance)?;
        optimal.retain(|a| legal.contains(a));
        if optimal.is_empty() {
            // the expert would stop here but the options mask EarlyExit
            break;
        }
        let action = optimal[rng.gen_range(0..optimal.len())];
        let features = ep.features();
        pairs.push(ExpertPair {
            state: ep.state().clone(),
            features: features.clone(),
            legal: legal.clone(),
            action,
            optimal,
        });
        let dist = ActionDistribution::point_mass(&legal, action, env.graph.num_actions());
        ep.apply(features, dist, action)?;
    }
    Ok((pairs, ep.finish()))
}

pub fn collect_expert_pairs(env: &Environment, suite: &[QueryInstance], opts: &RolloutOptions) -> Result<Vec<ExpertPair>> {
    let per: Vec<Vec<ExpertPair>> = suite
        .par_iter()
        .map(|q| expert_rollout(env, q, opts).map(|(p, _)| p))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Adds `coef · ∇ log π(τ)` to `grads` and returns `log π(τ)`, recomputing
/// every step's distribution at temperature `alpha`.
fn accumulate_logprob(
    params: &ParamSet,
    traj: &Trajectory,
    alpha: f64,
    coef: f64,
    entropy_coef: f64,
    grads: &mut GradSet,
) -> Result<(f64, f64)> {
    let mut logp = 0.0;
    let mut entropy = 0.0;
    for (t, s) in traj.steps.iter().enumerate() {
        let fwd = policy::forward(params, &s.features, &s.dist.actions, alpha)?;
        let i = fwd.dist.index_of(s.action).ok_or(Error::ZeroProbabilityAction { step: t })?;
        logp += fwd.dist.probs[i].ln();
        entropy += fwd.dist.entropy();
        let mut g: Vec<f64> = fwd.dist.dlogp_dlogits(i).iter().map(|d| coef * d).collect();
        if entropy_coef != 0.0 {
            for (gi, dh) in g.iter_mut().zip(fwd.dist.dentropy_dlogits()) {
                *gi += entropy_coef * dh;
            }
        }
        if g.iter().any(|&x| x != 0.0) {
            policy::backward(params, &s.features, &fwd, &g, grads);
        }
    }
    Ok((logp, entropy))
}

/// Mean negative log-likelihood of expert actions.
pub struct BcObjective<'a> {
    pairs: Vec<&'a ExpertPair>,
    alpha: f64,
}

impl<'a> BcObjective<'a> {
    pub fn new(pairs: Vec<&'a ExpertPair>, alpha: f64) -> Result<Self> {
        for p in &pairs {
            if !p.legal.contains(&p.action) {
                return Err(Error::IllegalExpertAction(format!("{:?}", p.state.position)));
            }
        }
        Ok(Self { pairs, alpha })
    }
}

impl Objective for BcObjective<'_> {
    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradSet)> {
        let mut grads = GradSet::zeros_like(params);
        if self.pairs.is_empty() {
            return Ok((0.0, grads));
        }
        let n = self.pairs.len() as f64;
        let mut loss = 0.0;
        for p in &self.pairs {
            let fwd = policy::forward(params, &p.features, &p.legal, self.alpha)?;
            let i = fwd.dist.index_of(p.action).expect("checked at construction");
            loss -= fwd.dist.probs[i].ln();
            let g: Vec<f64> = fwd.dist.dlogp_dlogits(i).iter().map(|d| -d / n).collect();
            policy::backward(params, &p.features, &fwd, &g, &mut grads);
        }
        Ok((loss / n, grads))
    }
}

/// `softmax(R_h / α_cpr)`.
pub fn cpr_weights(rewards: &[f64], alpha_cpr: f64) -> Vec<f64> {
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = rewards.iter().map(|r| ((r - max) / alpha_cpr).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// K sampled workflows for one instance and their heuristic rewards.
#[derive(Clone, Debug)]
pub struct CprBatch {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub alpha_cpr: f64,
}

impl CprBatch {
    pub fn new(trajectories: Vec<Trajectory>, rewards: Vec<f64>, alpha_cpr: f64) -> Result<Self> {
        if trajectories.len() < 2 || trajectories.len() != rewards.len() {
            return Err(Error::Config("a CPR batch needs K >= 2 trajectories with one reward each".into()));
        }
        if rewards.iter().any(|r| !r.is_finite()) || !(alpha_cpr > 0.0) {
            return Err(Error::Config("CPR rewards must be finite and alpha_cpr positive".into()));
        }
        Ok(Self {
            trajectories,
            rewards,
            alpha_cpr,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        cpr_weights(&self.rewards, self.alpha_cpr)
    }
}

/// InfoNCE over sampled paths: `−Σ_k p(τ_k) log π(τ_k)`, averaged over batches.
/// The samples are fixed; gradient flows only through `log π`.
pub struct CprObjective<'a> {
    pub batches: &'a [CprBatch],
    pub alpha: f64,
}

impl Objective for CprObjective<'_> {
    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradSet)> {
        let mut grads = GradSet::zeros_like(params);
        if self.batches.is_empty() {
            return Ok((0.0, grads));
        }
        let n = self.batches.len() as f64;
        let mut loss = 0.0;
        for b in self.batches {
            for (t, w) in b.trajectories.iter().zip(b.weights()) {
                let (lp, _) = accumulate_logprob(params, t, self.alpha, -w / n, 0.0, &mut grads)?;
                loss -= w * lp;
            }
        }
        Ok((loss / n, grads))
    }
}

/// Score-function surrogate for a set of episodes with fixed advantages,
/// plus an entropy bonus on the mean per-step policy entropy:
/// `−(1/N) Σ_i [A_i log π(τ_i) + (β/|τ_i|) Σ_t H(π(·|s_t))]`.
pub struct ReinforceObjective<'a> {
    pub episodes: &'a [(Trajectory, f64)],
    pub alpha: f64,
    pub entropy_coef: f64,
}

impl Objective for ReinforceObjective<'_> {
    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradSet)> {
        let mut grads = GradSet::zeros_like(params);
        if self.episodes.is_empty() {
            return Ok((0.0, grads));
        }
        let n = self.episodes.len() as f64;
        let mut loss = 0.0;
        for (t, adv) in self.episodes {
            // entropy bonus on the mean per-step entropy of each episode
            let steps = t.steps.len().max(1) as f64;
            let beta = self.entropy_coef / steps;
            let (lp, h) = accumulate_logprob(params, t, self.alpha, -adv / n, -beta / n, &mut grads)?;
            loss -= adv * lp + beta * h;
        }
        Ok((loss / n, grads))
    }
}

/// Weights of the Phase III reward `U − λ·cost − γ·H(â)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub lambda: f64,
    pub gamma: f64,
    pub entropy_rollouts: usize,
    pub cost_weights: CostWeights,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            lambda: 0.03,
            gamma: 0.02,
            entropy_rollouts: 4,
            cost_weights: CostWeights::default(),
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda, self.gamma, self.cost_weights.latency, self.cost_weights.tokens];
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("reward weights must be finite and non-negative".into()));
        }
        if self.entropy_rollouts == 0 {
            return Err(Error::Config("entropy_rollouts must be at least 1".into()));
        }
        Ok(())
    }
}

/// `U − λ·normalized_cost − γ·entropy_est`.
pub fn episode_reward(
    answer: &crate::environment::Answer,
    truth: &crate::environment::Answer,
    normalized_cost: f64,
    spec: &RewardSpec,
    entropy_est: f64,
) -> f64 {
    utility(answer, truth) - spec.lambda * normalized_cost - spec.gamma * entropy_est
}

/// Monte Carlo entropy (nats) of the answer distribution from `m` rollouts.
pub fn answer_entropy<R: Rng + ?Sized>(
    env: &Environment,
    params: &ParamSet,
    instance: &QueryInstance,
    opts: &RolloutOptions,
    alpha: f64,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    Ok(entropy_of(&estimate_marginal(env, params, instance, opts, alpha, m, rng)?))
}

/// Exponential moving average of episode rewards, started at the first
/// reward rather than at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub decay: f64,
    #[serde(default)]
    pub updates: u64,
}

impl Default for Baseline {
    fn default() -> Self {
        Self {
            value: 0.0,
            decay: 0.99,
            updates: 0,
        }
    }
}

impl Baseline {
    pub fn update(&mut self, reward: f64) {
        self.value = if self.updates == 0 {
            reward
        } else {
            self.decay * self.value + (1.0 - self.decay) * reward
        };
        self.updates += 1;
    }
}

/// Summary of one Phase III episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub trajectory: Trajectory,
    pub reward: f64,
    pub utility: f64,
    pub normalized_cost: f64,
    pub entropy: f64,
}

/// Sample an episode and score it with `spec`. The entropy estimate uses
/// `spec.entropy_rollouts` extra rollouts, skipped when `γ = 0`.
pub fn play_episode<R: Rng + ?Sized>(
    env: &Environment,
    params: &ParamSet,
    instance: &QueryInstance,
    spec: &RewardSpec,
    opts: &RolloutOptions,
    alpha: f64,
    rng: &mut R,
) -> Result<EpisodeOutcome> {
    let r = rollout(env, params, instance, opts, alpha, rng)?;
    let entropy = if spec.gamma > 0.0 {
        answer_entropy(env, params, instance, opts, alpha, spec.entropy_rollouts, rng)?
    } else {
        0.0
    };
    let cost = env.normalized_cost(&r.trajectory.actions());
    let u = utility(&r.answer, &instance.truth.answer_fields);
    Ok(EpisodeOutcome {
        reward: u - spec.lambda * cost - spec.gamma * entropy,
        utility: u,
        normalized_cost: cost,
        entropy,
        trajectory: r.trajectory,
    })
}

/// One REINFORCE gradient `(R − b)·∇log π(τ)` (as a loss gradient, with the
/// entropy bonus), updating the baseline afterwards.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_update<R: Rng + ?Sized>(
    env: &Environment,
    params: &ParamSet,
    instance: &QueryInstance,
    spec: &RewardSpec,
    baseline: &mut Baseline,
    opts: &RolloutOptions,
    alpha: f64,
    entropy_coef: f64,
    rng: &mut R,
) -> Result<(GradSet, EpisodeOutcome)> {
    let out = play_episode(env, params, instance, spec, opts, alpha, rng)?;
    let episodes = [(out.trajectory.clone(), out.reward - baseline.value)];
    let g = crate::optim::grad(
        &ReinforceObjective {
            episodes: &episodes,
            alpha,
            entropy_coef,
        },
        params,
    )?;
    baseline.update(out.reward);
    Ok((g, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Bc,
    Cpr,
    Rl,
    Done,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Bc => "bc",
            Phase::Cpr => "cpr",
            Phase::Rl => "rl",
            Phase::Done => "done",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: u64,
    pub lr: f64,
    /// Pairs (BC), instances (CPR) or episodes (RL) per update.
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub bc: PhaseConfig,
    pub cpr: PhaseConfig,
    pub rl: PhaseConfig,
    pub cpr_k: usize,
    pub alpha_cpr: f64,
    /// Draw new candidate paths for every CPR update instead of reusing the
    /// first draw for the whole phase.
    pub cpr_fresh_samples: bool,
    pub heuristic: HeuristicSpec,
    pub reward: RewardSpec,
    pub entropy_bonus: f64,
    pub clip_norm: f64,
    pub adamw: AdamWConfig,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub skip_bc: bool,
    pub skip_cpr: bool,
    pub skip_rl: bool,
    pub rollout: RolloutOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            bc: PhaseConfig {
                steps: 300,
                lr: 3e-3,
                batch: 64,
            },
            cpr: PhaseConfig {
                steps: 60,
                lr: 1e-3,
                batch: 4,
            },
            rl: PhaseConfig {
                steps: 1000,
                lr: 3e-4,
                batch: 8,
            },
            cpr_k: 8,
            alpha_cpr: 0.5,
            cpr_fresh_samples: true,
            heuristic: HeuristicSpec::default(),
            reward: RewardSpec::default(),
            entropy_bonus: 0.01,
            clip_norm: 1.0,
            adamw: AdamWConfig::default(),
            temperature_start: 2.0,
            temperature_end: 0.8,
            skip_bc: false,
            skip_cpr: false,
            skip_rl: false,
            rollout: RolloutOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.heuristic.validate()?;
        self.reward.validate()?;
        if self.cpr_k < 2 {
            return Err(Error::Config("cpr_k must be at least 2".into()));
        }
        if !(self.alpha_cpr > 0.0) {
            return Err(Error::Config("alpha_cpr must be positive".into()));
        }
        if !(self.temperature_start >= self.temperature_end && self.temperature_end > 0.0) {
            return Err(Error::Config("temperature must anneal from start >= end > 0".into()));
        }
        for (name, p) in [("bc", &self.bc), ("cpr", &self.cpr), ("rl", &self.rl)] {
            if p.batch == 0 || !(p.lr >= 0.0) {
                return Err(Error::Config(format!("{name}: batch must be positive and lr non-negative")));
            }
        }
        if self.hidden == 0 || !(self.clip_norm > 0.0) || !(self.entropy_bonus >= 0.0) {
            return Err(Error::Config("hidden, clip_norm and entropy_bonus must be positive".into()));
        }
        Ok(())
    }

    fn phase(&self, p: Phase) -> Option<&PhaseConfig> {
        match p {
            Phase::Bc if !self.skip_bc => Some(&self.bc),
            Phase::Cpr if !self.skip_cpr => Some(&self.cpr),
            Phase::Rl if !self.skip_rl => Some(&self.rl),
            _ => None,
        }
    }

    pub fn phase_steps(&self, p: Phase) -> u64 {
        self.phase(p).map(|c| c.steps).unwrap_or(0)
    }

    pub fn schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            start: self.temperature_start,
            end: self.temperature_end,
            total_steps: [Phase::Bc, Phase::Cpr, Phase::Rl].iter().map(|&p| self.phase_steps(p)).sum(),
        }
    }
}

/// One row of a phase report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub phase: String,
    pub step: u64,
    pub loss_or_reward: f64,
    pub lr: f64,
    pub temperature: f64,
    pub mean_cost: Option<f64>,
    pub mean_utility: Option<f64>,
}

/// Resumable curriculum state. Every random draw comes from one seeded
/// generator, so a run is a pure function of config, suite and seed.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub env: Environment,
    pub config: TrainConfig,
    pub suite: Vec<QueryInstance>,
    pub params: ParamSet,
    pub opt: OptimizerState,
    pub rng: ChaCha8Rng,
    pub phase: Phase,
    pub phase_step: u64,
    pub global_step: u64,
    pub baseline: Baseline,
    pub reports: Vec<ReportRow>,
    expert_pairs: Vec<ExpertPair>,
    cpr_cache: Vec<CprBatch>,
}

impl Trainer {
    /// Fresh parameters initialized from a child of `seed`; `seed` also
    /// drives every draw of the run.
    pub fn new(env: Environment, config: TrainConfig, suite: Vec<QueryInstance>, seed: u64) -> Result<Self> {
        let mut cfg = ModelConfig::standard(env.graph.num_actions());
        cfg.hidden = config.hidden;
        let params = init_params(&cfg, derived_rng(seed, "init", 0).gen());
        Self::with_params(env, config, suite, seed, params)
    }

    pub fn with_params(env: Environment, config: TrainConfig, suite: Vec<QueryInstance>, seed: u64, params: ParamSet) -> Result<Self> {
        config.validate()?;
        if suite.is_empty() {
            return Err(Error::EmptySuite);
        }
        let expert_pairs = if config.phase_steps(Phase::Bc) > 0 {
            collect_expert_pairs(&env, &suite, &config.rollout)?
        } else {
            Vec::new()
        };
        let opt = OptimizerState::new(&params, config.adamw);
        let mut t = Self {
            env,
            config,
            suite,
            params,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            phase: Phase::Bc,
            phase_step: 0,
            global_step: 0,
            baseline: Baseline::default(),
            reports: Vec::new(),
            expert_pairs,
            cpr_cache: Vec::new(),
        };
        t.skip_empty_phases();
        Ok(t)
    }

    pub fn expert_pairs(&self) -> &[ExpertPair] {
        &self.expert_pairs
    }

    pub fn alpha(&self) -> f64 {
        temperature(self.global_step, &self.config.schedule())
    }

    fn skip_empty_phases(&mut self) {
        while self.phase != Phase::Done && self.phase_step >= self.config.phase_steps(self.phase) {
            self.phase = match self.phase {
                Phase::Bc => Phase::Cpr,
                Phase::Cpr => Phase::Rl,
                Phase::Rl | Phase::Done => Phase::Done,
            };
            self.phase_step = 0;
            self.opt = OptimizerState::new(&self.params, self.config.adamw);
            self.cpr_cache.clear();
        }
    }

    /// Jump to the start of `phase`, e.g. to refit Phase III from a shared
    /// earlier checkpoint.
    pub fn enter_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.phase_step = 0;
        self.opt = OptimizerState::new(&self.params, self.config.adamw);
        self.cpr_cache.clear();
        self.skip_empty_phases();
    }

    fn apply_update(&mut self, mut grads: GradSet, base_lr: f64) -> Result<f64> {
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss(f64::NAN));
        }
        clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = cosine_lr(self.phase_step, self.config.phase_steps(self.phase), base_lr);
        adamw_step(&mut self.params, &grads, &mut self.opt, lr);
        Ok(lr)
    }

    /// Perform a single update of the current phase. Returns false once done.
    pub fn step(&mut self) -> Result<bool> {
        if self.phase == Phase::Done {
            return Ok(false);
        }
        let alpha = self.alpha();
        let row = match self.phase {
            Phase::Bc => self.bc_step(alpha)?,
            Phase::Cpr => self.cpr_step(alpha)?,
            Phase::Rl => self.rl_step(alpha)?,
            Phase::Done => unreachable!(),
        };
        self.reports.push(row);
        self.phase_step += 1;
        self.global_step += 1;
        let before = self.phase;
        self.skip_empty_phases();
        if before != self.phase {
            log::info!("finished phase {} at global step {}", before.label(), self.global_step);
        }
        Ok(true)
    }

    /// Run to completion, calling `on_phase_end` after each finished phase.
    pub fn run_with_hook(&mut self, mut on_phase_end: impl FnMut(&Trainer, Phase) -> Result<()>) -> Result<()> {
        while self.phase != Phase::Done {
            let before = self.phase;
            self.step()?;
            if self.phase != before {
                on_phase_end(self, before)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with_hook(|_, _| Ok(()))
    }

    fn bc_step(&mut self, alpha: f64) -> Result<ReportRow> {
        let n = self.expert_pairs.len();
        if n == 0 {
            return Err(Error::Config("no expert pairs for behavior cloning".into()));
        }
        let idx: Vec<usize> = (0..self.config.bc.batch).map(|_| self.rng.gen_range(0..n)).collect();
        let batch: Vec<&ExpertPair> = idx.iter().map(|&i| &self.expert_pairs[i]).collect();
        let (loss, grads) = BcObjective::new(batch, alpha)?.loss_and_grad(&self.params)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        let lr = self.apply_update(grads, self.config.bc.lr)?;
        Ok(self.row(loss, lr, alpha, None, None))
    }

    fn sample_cpr_batches(&mut self, alpha: f64) -> Result<Vec<CprBatch>> {
        let k = self.config.cpr_k;
        let jobs: Vec<(usize, u64)> = (0..self.config.cpr.batch * k)
            .map(|j| {
                let inst = if j % k == 0 { self.rng.gen_range(0..self.suite.len()) } else { usize::MAX };
                (inst, self.rng.gen::<u64>())
            })
            .collect();
        let insts: Vec<usize> = jobs.chunks(k).map(|c| c[0].0).collect();
        let env = &self.env;
        let params = &self.params;
        let opts = self.config.rollout;
        let heur = self.config.heuristic;
        let suite = &self.suite;
        let samples: Vec<(Trajectory, f64)> = jobs
            .par_iter()
            .enumerate()
            .map(|(j, &(_, seed))| {
                let q = &suite[insts[j / k]];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let r = rollout(env, params, q, &opts, alpha, &mut rng)?;
                let h = heuristic_reward(&r.trajectory, q, &env.graph, env.t_max, &heur).total;
                Ok((r.trajectory, h))
            })
            .collect::<Result<_>>()?;
        let mut batches = Vec::new();
        let mut it = samples.into_iter();
        for _ in 0..self.config.cpr.batch {
            let (trajs, rewards): (Vec<_>, Vec<_>) = it.by_ref().take(k).unzip();
            batches.push(CprBatch::new(trajs, rewards, self.config.alpha_cpr)?);
        }
        Ok(batches)
    }

    fn cpr_step(&mut self, alpha: f64) -> Result<ReportRow> {
        if self.config.cpr_fresh_samples || self.cpr_cache.is_empty() {
            self.cpr_cache = self.sample_cpr_batches(alpha)?;
        }
        let batches = std::mem::take(&mut self.cpr_cache);
        let (loss, grads) = CprObjective {
            batches: &batches,
            alpha,
        }
        .loss_and_grad(&self.params)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        let trajs: Vec<&Trajectory> = batches.iter().flat_map(|b| &b.trajectories).collect();
        let mean_cost = trajs.iter().map(|t| self.env.normalized_cost(&t.actions())).sum::<f64>() / trajs.len() as f64;
        let lr = self.apply_update(grads, self.config.cpr.lr)?;
        self.cpr_cache = batches;
        Ok(self.row(loss, lr, alpha, Some(mean_cost), None))
    }

    fn rl_step(&mut self, alpha: f64) -> Result<ReportRow> {
        let jobs: Vec<(usize, u64)> = (0..self.config.rl.batch)
            .map(|_| (self.rng.gen_range(0..self.suite.len()), self.rng.gen::<u64>()))
            .collect();
        let (env, params, suite, cfg) = (&self.env, &self.params, &self.suite, &self.config);
        let outcomes: Vec<EpisodeOutcome> = jobs
            .par_iter()
            .map(|&(i, seed)| {
                let mut rng = derived_rng(seed, "episode", 0);
                play_episode(env, params, &suite[i], &cfg.reward, &cfg.rollout, alpha, &mut rng)
            })
            .collect::<Result<_>>()?;
        let b = self.baseline.value;
        let episodes: Vec<(Trajectory, f64)> = outcomes.iter().map(|o| (o.trajectory.clone(), o.reward - b)).collect();
        let (loss, grads) = ReinforceObjective {
            episodes: &episodes,
            alpha,
            entropy_coef: self.config.entropy_bonus,
        }
        .loss_and_grad(&self.params)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        for o in &outcomes {
            self.baseline.update(o.reward);
        }
        let n = outcomes.len() as f64;
        let mean = |f: fn(&EpisodeOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
        let (reward, cost, util) = (mean(|o| o.reward), mean(|o| o.normalized_cost), mean(|o| o.utility));
        let lr = self.apply_update(grads, self.config.rl.lr)?;
        Ok(self.row(reward, lr, alpha, Some(cost), Some(util)))
    }

    fn row(&self, value: f64, lr: f64, alpha: f64, cost: Option<f64>, util: Option<f64>) -> ReportRow {
        ReportRow {
            phase: self.phase.label().to_string(),
            step: self.phase_step,
            loss_or_reward: value,
            lr,
            temperature: alpha,
            mean_cost: cost,
            mean_utility: util,
        }
    }
}

/// Fraction of pairs on which the policy's argmax is one of the expert's
/// optimal actions.
pub fn argmax_agreement(params: &ParamSet, pairs: &[ExpertPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let hits = pairs
        .par_iter()
        .map(|p| policy::forward(params, &p.features, &p.legal, 1.0).map(|f| p.optimal.contains(&f.dist.argmax()) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / pairs.len() as f64)
}
