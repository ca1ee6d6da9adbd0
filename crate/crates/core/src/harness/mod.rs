//! Run configuration, evaluation, λ sweeps, ablations and checkpoints.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::scoring::{canonical_answer_key, utility};
use crate::environment::{generate_suite, Environment, QueryInstance, SuiteConfig, ToolRegistry, DEFAULT_T_MAX};
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::runtime::{rollout, RolloutOptions, DEFAULT_TEMPERATURE};
use crate::supernet::{build_graph, SupernetSpec};
use crate::training::{expert_rollout, Phase, TrainConfig, Trainer};
use crate::util::{derived_rng, sha256_hex};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Progress, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub greedy: bool,
    pub temperature: f64,
    pub samples_per_instance: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            greedy: false,
            temperature: DEFAULT_TEMPERATURE,
            samples_per_instance: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Share Phases I and II per seed; refit only Phase III for each λ.
    RefitPhase3,
    /// Retrain every phase for each λ.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub mode: SweepMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.003, 0.03, 0.3],
            mode: SweepMode::RefitPhase3,
        }
    }
}

/// Complete description of a run. Every field has an explicit default, and
/// the resolved form is echoed into each report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Supernet document; the bundled standard graph when absent.
    pub graph: Option<PathBuf>,
    pub t_max: usize,
    pub tool_seed: u64,
    pub suite: SuiteConfig,
    pub suite_seed: u64,
    pub eval_suite: SuiteConfig,
    pub eval_suite_seed: u64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            graph: None,
            t_max: DEFAULT_T_MAX,
            tool_seed: 0,
            suite: SuiteConfig {
                size: 600,
                ..SuiteConfig::default()
            },
            suite_seed: 1,
            eval_suite: SuiteConfig::default(),
            eval_suite_seed: 2,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; a relative graph path resolves against the
    /// config's directory and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(g) = &cfg.graph {
            if g.is_relative() {
                cfg.graph = Some(path.parent().unwrap_or(Path::new(".")).join(g));
            }
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        if let Some(g) = &self.graph {
            if !g.is_file() {
                return Err(Error::Config(format!("graph spec `{}` does not exist", g.display())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.suite.validate()?;
        self.eval_suite.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.eval.temperature > 0.0) || self.eval.samples_per_instance == 0 {
            return Err(Error::Config("eval temperature and samples_per_instance must be positive".into()));
        }
        Ok(())
    }

    /// Apply `dotted.key=json` overrides, e.g. `train.reward.lambda=0.3`.
    /// A value that is not valid JSON is taken as a string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn resolved_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.resolved_json().as_bytes())[..16].to_string()
    }

    pub fn build_environment(&self) -> Result<Environment> {
        let spec = match &self.graph {
            None => SupernetSpec::standard(),
            Some(p) => SupernetSpec::from_json(
                &std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            )?,
        };
        let graph = build_graph(&spec, &ToolRegistry::standard())?;
        Ok(Environment::new(graph, self.t_max, self.train.reward.cost_weights).with_tool_seed(self.tool_seed))
    }

    pub fn train_suite(&self, env: &Environment) -> Result<Vec<QueryInstance>> {
        generate_suite(&env.graph, self.suite_seed, &self.suite)
    }

    pub fn eval_suite(&self, env: &Environment) -> Result<Vec<QueryInstance>> {
        generate_suite(&env.graph, self.eval_suite_seed, &self.eval_suite)
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    pub sample: usize,
    pub utility: f64,
    pub correct: bool,
    pub normalized_cost: f64,
    pub steps: usize,
    pub invocations: usize,
    pub early_exit: bool,
    pub answer: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_utility: f64,
    pub mean_cost: f64,
    pub mean_length: f64,
    pub early_exit_rate: f64,
    pub episodes: usize,
}

impl EvalMetrics {
    /// `mean U − λ · mean cost`.
    pub fn objective(&self, lambda: f64) -> f64 {
        self.mean_utility - lambda * self.mean_cost
    }

    fn from_rows(rows: &[InstanceResult]) -> Self {
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&InstanceResult) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            accuracy: mean(&|r| r.correct as u8 as f64),
            mean_utility: mean(&|r| r.utility),
            mean_cost: mean(&|r| r.normalized_cost),
            mean_length: mean(&|r| r.invocations as f64),
            early_exit_rate: mean(&|r| r.early_exit as u8 as f64),
            episodes: rows.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: EvalMetrics,
    pub instances: Vec<InstanceResult>,
}

/// Roll the policy over every instance (`samples_per_instance` times each).
/// Each rollout draws from its own generator derived from `eval.seed`.
pub fn evaluate(
    env: &Environment,
    params: &ParamSet,
    suite: &[QueryInstance],
    eval: &EvalConfig,
    opts: &RolloutOptions,
) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::EmptySuite);
    }
    let opts = RolloutOptions {
        greedy: eval.greedy,
        ..*opts
    };
    let jobs: Vec<(usize, usize)> = (0..suite.len())
        .flat_map(|i| (0..eval.samples_per_instance).map(move |s| (i, s)))
        .collect();
    let rows: Vec<InstanceResult> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let q = &suite[i];
            let mut rng = derived_rng(eval.seed, "eval", (i * eval.samples_per_instance + s) as u64);
            let r = rollout(env, params, q, &opts, eval.temperature, &mut rng)?;
            Ok(instance_row(env, q, s, &r.trajectory, &r.answer))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        metrics: EvalMetrics::from_rows(&rows),
        instances: rows,
    })
}

fn instance_row(
    env: &Environment,
    q: &QueryInstance,
    sample: usize,
    traj: &crate::policy::Trajectory,
    answer: &crate::environment::Answer,
) -> InstanceResult {
    let u = utility(answer, &q.truth.answer_fields);
    InstanceResult {
        id: q.id.clone(),
        sample,
        utility: u,
        correct: u == 1.0,
        normalized_cost: env.normalized_cost(&traj.actions()),
        steps: traj.steps.len(),
        invocations: traj.num_invocations(),
        early_exit: traj.terminated_by == crate::policy::Termination::EarlyExit,
        answer: canonical_answer_key(answer),
    }
}

/// Evaluate the scripted expert itself.
pub fn evaluate_expert(env: &Environment, suite: &[QueryInstance], opts: &RolloutOptions) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::EmptySuite);
    }
    let rows: Vec<InstanceResult> = suite
        .par_iter()
        .map(|q| {
            let (_, traj) = expert_rollout(env, q, opts)?;
            let answer = crate::environment::synthesize_answer(&traj);
            Ok(instance_row(env, q, 0, &traj, &answer))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        metrics: EvalMetrics::from_rows(&rows),
        instances: rows,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// CSV text whose first line echoes the resolved config as a `#` comment.
pub fn csv_with_config<T: Serialize>(config: &RunConfig, rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8");
    Ok(format!("# config {}\n{}", config.resolved_json(), body))
}

pub fn write_report<T: Serialize>(config: &RunConfig, rows: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(csv_with_config(config, rows)?.as_bytes())?;
    Ok(())
}

/// Parse a report written by [`write_report`], skipping the config line.
pub fn read_report<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

// ---------------------------------------------------------------------------
// Training runs and checkpoints
// ---------------------------------------------------------------------------

impl Trainer {
    pub fn checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            graph_fingerprint: self.env.graph.fingerprint().to_string(),
            params: self.params.clone(),
            optimizer: Some(self.opt.clone()),
            rng: Some(RngState::capture(&self.rng)),
            progress: Some(Progress {
                phase: self.phase,
                phase_step: self.phase_step,
                global_step: self.global_step,
                baseline: self.baseline,
            }),
            meta,
        }
    }

    /// Continue a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(env: Environment, config: TrainConfig, suite: Vec<QueryInstance>, ck: &Checkpoint) -> Result<Self> {
        ck.check_graph(env.graph.fingerprint())?;
        let mut t = Trainer::with_params(env, config, suite, 0, ck.params.clone())?;
        if let Some(o) = &ck.optimizer {
            if !o.first_moment.same_shape(&t.params) || !o.second_moment.same_shape(&t.params) {
                return Err(Error::MalformedCheckpoint("optimizer moments do not match parameters".into()));
            }
            t.opt = o.clone();
        }
        if let Some(r) = &ck.rng {
            t.rng = r.restore()?;
        }
        if let Some(p) = ck.progress {
            t.phase = p.phase;
            t.phase_step = p.phase_step;
            t.global_step = p.global_step;
            t.baseline = p.baseline;
        }
        Ok(t)
    }
}

/// Run metadata stored in checkpoints.
pub fn run_meta(config: &RunConfig, seed: u64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("config_fingerprint".to_string(), config.fingerprint()),
        ("seed".to_string(), seed.to_string()),
    ])
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub checkpoint: Checkpoint,
}

/// Train one seed, writing a checkpoint after each phase, the final model
/// and the phase report into `out_dir` when given.
pub fn train_run(config: &RunConfig, seed: u64, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let env = config.build_environment()?;
    let suite = config.train_suite(&env)?;
    let mut trainer = Trainer::new(env, config.train.clone(), suite, seed)?;
    let meta = run_meta(config, seed);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    trainer.run_with_hook(|t, phase| {
        if let Some(dir) = out_dir {
            save_checkpoint(&t.checkpoint(meta.clone()), &dir.join(format!("checkpoint_{}.bin", phase.label())))?;
        }
        Ok(())
    })?;
    let ck = trainer.checkpoint(meta);
    if let Some(dir) = out_dir {
        save_checkpoint(&ck, &dir.join("model.bin"))?;
        write_report(config, &trainer.reports, &dir.join("phase_report.csv"))?;
    }
    Ok(TrainOutcome {
        trainer,
        checkpoint: ck,
    })
}

// ---------------------------------------------------------------------------
// Pareto sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub lambda: f64,
    pub mean_utility: f64,
    pub mean_normalized_cost: f64,
    pub accuracy: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub lambda: f64,
    pub point: std::result::Result<FrontierPoint, String>,
    pub per_seed: Vec<EvalMetrics>,
}

/// Remove duplicate λ values (keeping first occurrences) and reject
/// empty or negative grids.
pub fn dedupe_lambdas(lambdas: &[f64]) -> Result<Vec<f64>> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    let mut out: Vec<f64> = Vec::new();
    for &l in lambdas {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::Config(format!("lambda {l} must be finite and non-negative")));
        }
        if out.contains(&l) {
            log::warn!("duplicate lambda {l} removed from sweep grid");
        } else {
            out.push(l);
        }
    }
    Ok(out)
}

fn average(points: &[EvalMetrics], lambda: f64) -> FrontierPoint {
    let n = points.len() as f64;
    FrontierPoint {
        lambda,
        mean_utility: points.iter().map(|m| m.mean_utility).sum::<f64>() / n,
        mean_normalized_cost: points.iter().map(|m| m.mean_cost).sum::<f64>() / n,
        accuracy: points.iter().map(|m| m.accuracy).sum::<f64>() / n,
        seeds: points.len(),
    }
}

fn with_lambda(cfg: &TrainConfig, lambda: f64) -> TrainConfig {
    let mut c = cfg.clone();
    c.reward.lambda = lambda;
    c
}

/// Train and evaluate one policy per (seed, λ) and average over seeds.
/// A failing point is reported without aborting the sweep.
pub fn pareto_sweep(config: &RunConfig, lambdas: &[f64]) -> Result<Vec<SweepOutcome>> {
    let lambdas = dedupe_lambdas(lambdas)?;
    let env = config.build_environment()?;
    let train = config.train_suite(&env)?;
    let eval = config.eval_suite(&env)?;
    let opts = config.train.rollout;

    let shared: Vec<Option<Trainer>> = match config.sweep.mode {
        SweepMode::Full => vec![None; config.seeds.len()],
        SweepMode::RefitPhase3 => config
            .seeds
            .par_iter()
            .map(|&seed| {
                let mut t = Trainer::new(env.clone(), config.train.clone(), train.clone(), seed)?;
                while t.phase != Phase::Rl && t.phase != Phase::Done {
                    t.step()?;
                }
                Ok(Some(t))
            })
            .collect::<Result<_>>()?,
    };

    let jobs: Vec<(usize, usize)> = (0..lambdas.len())
        .flat_map(|l| (0..config.seeds.len()).map(move |s| (l, s)))
        .collect();
    let results: Vec<Result<EvalMetrics>> = jobs
        .par_iter()
        .map(|&(l, s)| {
            let cfg = with_lambda(&config.train, lambdas[l]);
            let mut t = match &shared[s] {
                Some(base) => {
                    let mut t = base.clone();
                    t.config = cfg;
                    t
                }
                None => Trainer::new(env.clone(), cfg, train.clone(), config.seeds[s])?,
            };
            t.run()?;
            Ok(evaluate(&env, &t.params, &eval, &config.eval, &opts)?.metrics)
        })
        .collect();

    let mut out = Vec::new();
    for (l, &lambda) in lambdas.iter().enumerate() {
        let mut per_seed = Vec::new();
        let mut err = None;
        for s in 0..config.seeds.len() {
            match &results[l * config.seeds.len() + s] {
                Ok(m) => per_seed.push(*m),
                Err(e) => err = Some(format!("seed {}: {e}", config.seeds[s])),
            }
        }
        let point = match err {
            Some(e) => Err(e),
            None => Ok(average(&per_seed, lambda)),
        };
        out.push(SweepOutcome { lambda, point, per_seed });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub accuracy: f64,
    pub mean_utility: f64,
    pub mean_cost: f64,
    pub delta_cost: f64,
    pub delta_accuracy: f64,
}

pub const ABLATIONS: [&str; 4] = ["full", "-early_exit", "-path_rank", "-expert_warmup"];

/// Training config and rollout options for a named ablation.
pub fn ablation_variant(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    match name {
        "full" => {}
        "-early_exit" => c.rollout.early_exit = false,
        "-path_rank" => c.skip_cpr = true,
        "-expert_warmup" => c.skip_bc = true,
        other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
    }
    Ok(c)
}

/// Rerun the curriculum with each component removed, averaged over seeds.
pub fn ablate(config: &RunConfig) -> Result<Vec<AblationRow>> {
    let env = config.build_environment()?;
    let train = config.train_suite(&env)?;
    let eval = config.eval_suite(&env)?;
    let jobs: Vec<(usize, u64)> = (0..ABLATIONS.len())
        .flat_map(|a| config.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let metrics: Vec<EvalMetrics> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let cfg = ablation_variant(&config.train, ABLATIONS[a])?;
            let mut t = Trainer::new(env.clone(), cfg.clone(), train.clone(), seed)?;
            t.run()?;
            Ok(evaluate(&env, &t.params, &eval, &config.eval, &cfg.rollout)?.metrics)
        })
        .collect::<Result<_>>()?;
    let per = config.seeds.len();
    let avg: Vec<FrontierPoint> = metrics.chunks(per).map(|c| average(c, config.train.reward.lambda)).collect();
    let full = avg[0];
    Ok(ABLATIONS
        .iter()
        .zip(&avg)
        .map(|(name, p)| AblationRow {
            configuration: name.to_string(),
            accuracy: p.accuracy,
            mean_utility: p.mean_utility,
            mean_cost: p.mean_normalized_cost,
            delta_cost: p.mean_normalized_cost - full.mean_normalized_cost,
            delta_accuracy: p.accuracy - full.accuracy,
        })
        .collect())
}
