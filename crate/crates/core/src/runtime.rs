//! Sequential workflow sampling, answer marginals and audit traces.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{extract_features, State, StateFeatures};
use crate::environment::scoring::{canonical_answer_key, synthesize_answer, Answer};
use crate::environment::{needs_context, Environment, QueryInstance};
use crate::error::{Error, Result};
use crate::memory::{summarize, MemoryEntry, TemplateSummarizer};
use crate::optim::ParamSet;
use crate::policy::{self, ActionDistribution, Termination, Trajectory, TrajectoryStep};
use crate::supernet::{execute_tool, route_payload, Action, ActionId, Payload, Position};
use crate::util::{f64s_to_bytes, stable_hash};

pub const TRACE_VERSION: u32 = 1;
/// Inference temperature: the end of the training anneal.
pub const DEFAULT_TEMPERATURE: f64 = 0.8;

/// Masking and decoding switches applied on top of the graph's legal set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutOptions {
    pub allow_revisit: bool,
    pub min_steps_before_exit: usize,
    /// When false, EarlyExit is masked wherever another action is legal.
    pub early_exit: bool,
    pub greedy: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            allow_revisit: true,
            min_steps_before_exit: 0,
            early_exit: true,
            greedy: false,
        }
    }
}

/// One rollout in progress.
#[derive(Clone, Debug)]
pub struct Episode<'a> {
    env: &'a Environment,
    instance: &'a QueryInstance,
    state: State,
    steps: Vec<TrajectoryStep>,
    visited: Vec<usize>,
    terminated: Option<Termination>,
}

impl<'a> Episode<'a> {
    pub fn new(env: &'a Environment, instance: &'a QueryInstance) -> Self {
        Self {
            env,
            instance,
            state: instance.initial_state(env.empty_memory()),
            steps: Vec::new(),
            visited: Vec::new(),
            terminated: None,
        }
    }

    pub fn instance(&self) -> &'a QueryInstance {
        self.instance
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn steps(&self) -> &[TrajectoryStep] {
        &self.steps
    }

    pub fn is_done(&self) -> bool {
        self.terminated.is_some() || self.steps.len() >= self.env.t_max
    }

    pub fn features(&self) -> StateFeatures {
        extract_features(&self.state, &self.env.extractors)
    }

    pub fn legal_actions(&self, opts: &RolloutOptions) -> Result<Vec<ActionId>> {
        let graph = &self.env.graph;
        let mut legal = graph.legal_actions(self.state.position)?;
        if !opts.allow_revisit {
            legal.retain(|&a| match graph.action(a) {
                Action::Invoke { container, .. } => !self.visited.contains(container),
                Action::EarlyExit => true,
            });
        }
        let exit = graph.exit_action();
        let mask_exit = !opts.early_exit || self.steps.len() < opts.min_steps_before_exit;
        if mask_exit && legal.len() > 1 {
            legal.retain(|&a| a != exit);
        }
        Ok(legal)
    }

    /// Execute `action` and record the step with the distribution it was drawn from.
    pub fn apply(&mut self, features: StateFeatures, dist: ActionDistribution, action: ActionId) -> Result<()> {
        if self.is_done() {
            return Err(Error::Config("episode already terminated".into()));
        }
        if dist.index_of(action).is_none() {
            return Err(Error::ZeroProbabilityAction { step: self.steps.len() });
        }
        let graph = &self.env.graph;
        let state_digest = format!(
            "{:016x}",
            stable_hash(&[&f64s_to_bytes(&features.image), &f64s_to_bytes(&features.text), &f64s_to_bytes(&features.memory)])
        );
        let position = self.state.position;
        let (container, _) = match graph.action(action) {
            Action::EarlyExit => {
                self.steps.push(TrajectoryStep {
                    position,
                    features,
                    state_digest,
                    dist,
                    action,
                    output: None,
                    degraded: None,
                    context_missing: false,
                });
                self.terminated = Some(Termination::EarlyExit);
                return Ok(());
            }
            Action::Invoke { container, tool } => (*container, *tool),
        };
        let ctype = graph.containers()[container].ctype;
        let routing = graph
            .routing(position, container)
            .ok_or_else(|| Error::UnknownPosition(graph.position_label(position).to_string()))?;
        let (output, degraded, context_missing) = match route_payload(routing, &self.state) {
            Err(e) => (None, Some(e.to_string()), true),
            Ok(input) => {
                let missing = needs_context(ctype) && input.context_slice.trim().is_empty();
                match execute_tool(graph, action, &input, self.env.tool_seed) {
                    Ok(out) => (Some(out), None, missing),
                    Err(e) => (None, Some(e.to_string()), missing),
                }
            }
        };
        let summary = output
            .as_ref()
            .map(|o| summarize(o, &TemplateSummarizer::default()))
            .unwrap_or_default();
        let image_ref = match output.as_ref().map(|o| &o.payload) {
            Some(Payload::Image { image }) => Some(image.clone()),
            _ => None,
        };
        let step = self.steps.len() as u32 + 1;
        self.state.memory.append(MemoryEntry {
            container_id: graph.containers()[container].id.clone(),
            summary,
            image_ref,
            step,
        })?;
        self.state.position = Position::At(container);
        self.visited.push(container);
        self.steps.push(TrajectoryStep {
            position,
            features,
            state_digest,
            dist,
            action,
            output,
            degraded,
            context_missing,
        });
        Ok(())
    }

    pub fn finish(self) -> Trajectory {
        Trajectory {
            steps: self.steps,
            terminated_by: self.terminated.unwrap_or(Termination::MaxSteps),
        }
    }
}

/// A finished rollout and its synthesized answer.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub answer: Answer,
}

/// Sample (or greedily decode) one trajectory and synthesize its answer.
pub fn rollout<R: Rng + ?Sized>(
    env: &Environment,
    params: &ParamSet,
    instance: &QueryInstance,
    opts: &RolloutOptions,
    alpha: f64,
    rng: &mut R,
) -> Result<Rollout> {
    let mut ep = Episode::new(env, instance);
    while !ep.is_done() {
        let legal = ep.legal_actions(opts)?;
        let features = ep.features();
        let fwd = policy::forward(params, &features, &legal, alpha)?;
        let action = if opts.greedy {
            fwd.dist.argmax()
        } else {
            policy::sample_action(&fwd.dist, rng)
        };
        ep.apply(features, fwd.dist, action)?;
    }
    let trajectory = ep.finish();
    let answer = synthesize_answer(&trajectory);
    Ok(Rollout { trajectory, answer })
}

/// Every trajectory the policy can produce on `instance`, with its probability.
/// Fails if there are more than `limit`.
pub fn enumerate_trajectories(
    env: &Environment,
    params: &ParamSet,
    instance: &QueryInstance,
    opts: &RolloutOptions,
    alpha: f64,
    limit: usize,
) -> Result<Vec<(Trajectory, f64)>> {
    let mut out = Vec::new();
    let mut stack = vec![(Episode::new(env, instance), 1.0f64)];
    while let Some((ep, p)) = stack.pop() {
        if ep.is_done() {
            if out.len() == limit {
                return Err(Error::Config(format!("more than {limit} trajectories")));
            }
            out.push((ep.finish(), p));
            continue;
        }
        let legal = ep.legal_actions(opts)?;
        let features = ep.features();
        let fwd = policy::forward(params, &features, &legal, alpha)?;
        for (i, &a) in legal.iter().enumerate().rev() {
            let mut child = ep.clone();
            let q = fwd.dist.probs[i];
            child.apply(features.clone(), fwd.dist.clone(), a)?;
            stack.push((child, p * q));
        }
    }
    Ok(out)
}

/// Exact answer marginal from an enumeration.
pub fn exact_marginal(trajectories: &[(Trajectory, f64)]) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (t, p) in trajectories {
        *m.entry(canonical_answer_key(&synthesize_answer(t))).or_insert(0.0) += p;
    }
    m
}

/// Monte Carlo answer marginal from `m` independent rollouts.
pub fn estimate_marginal<R: Rng + ?Sized>(
    env: &Environment,
    params: &ParamSet,
    instance: &QueryInstance,
    opts: &RolloutOptions,
    alpha: f64,
    m: usize,
    rng: &mut R,
) -> Result<BTreeMap<String, f64>> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..m {
        let r = rollout(env, params, instance, opts, alpha, rng)?;
        *counts.entry(canonical_answer_key(&r.answer)).or_insert(0) += 1;
    }
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / m as f64)).collect())
}

/// Shannon entropy (nats) of a distribution.
pub fn entropy_of(dist: &BTreeMap<String, f64>) -> f64 {
    -dist.values().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Total variation distance between two distributions over answer keys.
pub fn total_variation(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .iter()
        .map(|k| (a.get(*k).unwrap_or(&0.0) - b.get(*k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Costs {
    pub latency: f64,
    pub tokens: u64,
    pub normalized: f64,
}

pub fn trajectory_costs(env: &Environment, traj: &Trajectory) -> Costs {
    let mut latency = 0.0;
    let mut tokens = 0;
    for s in &traj.steps {
        if let Action::Invoke { container, tool } = env.graph.action(s.action) {
            let t = env.graph.tool_spec(*container, *tool);
            latency += t.latency;
            tokens += t.tokens;
        }
    }
    Costs {
        latency,
        tokens,
        normalized: env.normalized_cost(&traj.actions()),
    }
}

/// Run metadata echoed into every trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub checkpoint_id: String,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub trace_version: u32,
    pub instance_id: String,
    pub graph_fingerprint: String,
    pub checkpoint_id: String,
    pub seed: u64,
    pub tool_seed: u64,
    pub temperature: f64,
    pub lambda: f64,
    pub options: RolloutOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceStep {
    pub step: usize,
    pub position: String,
    pub legal_actions: Vec<String>,
    pub probs: Vec<f64>,
    pub chosen: String,
    pub chosen_prob: f64,
    pub latency: f64,
    pub tokens: u64,
    pub memory_appended: Option<String>,
    pub degraded: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceResult {
    pub answer: Answer,
    pub terminated_by: Termination,
    pub steps: usize,
    pub total_latency: f64,
    pub total_tokens: u64,
    pub normalized_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceLine {
    Header(TraceHeader),
    Step(TraceStep),
    Result(TraceResult),
}

/// Probability-annotated record of one inference run.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub header: TraceHeader,
    pub steps: Vec<TraceStep>,
    pub result: TraceResult,
}

impl TraceRecord {
    pub fn lines(&self) -> Vec<TraceLine> {
        let mut v = vec![TraceLine::Header(self.header.clone())];
        v.extend(self.steps.iter().cloned().map(TraceLine::Step));
        v.push(TraceLine::Result(self.result.clone()));
        v
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for l in self.lines() {
            s.push_str(&serde_json::to_string(&l).expect("trace lines serialize"));
            s.push('\n');
        }
        s
    }

    /// Parse one trace; `text` must hold exactly a header, its steps and a result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut traces = parse_traces(text)?;
        if traces.len() != 1 {
            return Err(Error::MalformedTrace(format!("expected one trace, found {}", traces.len())));
        }
        Ok(traces.pop().expect("one trace"))
    }
}

fn check_step(s: &TraceStep, expected_index: usize) -> Result<()> {
    if s.step != expected_index {
        return Err(Error::MalformedTrace(format!("step index {} where {} was expected", s.step, expected_index)));
    }
    if s.legal_actions.len() != s.probs.len() || s.legal_actions.is_empty() {
        return Err(Error::MalformedTrace(format!("step {}: actions and probabilities disagree", s.step)));
    }
    if !s.legal_actions.contains(&s.chosen) {
        return Err(Error::MalformedTrace(format!("step {}: chosen action is not legal", s.step)));
    }
    Ok(())
}

/// Parse a stream of concatenated traces.
pub fn parse_traces(text: &str) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    let mut current: Option<(TraceHeader, Vec<TraceStep>)> = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(line)
            .map_err(|e| Error::MalformedTrace(format!("line {}: {e}", n + 1)))?;
        match parsed {
            TraceLine::Header(h) => {
                if current.is_some() {
                    return Err(Error::MalformedTrace(format!("line {}: header inside an open trace", n + 1)));
                }
                if h.trace_version != TRACE_VERSION {
                    return Err(Error::VersionMismatch {
                        found: h.trace_version,
                        expected: TRACE_VERSION,
                    });
                }
                current = Some((h, Vec::new()));
            }
            TraceLine::Step(s) => {
                let Some((_, steps)) = current.as_mut() else {
                    return Err(Error::MalformedTrace(format!("line {}: step before header", n + 1)));
                };
                check_step(&s, steps.len() + 1)?;
                steps.push(s);
            }
            TraceLine::Result(r) => {
                let Some((header, steps)) = current.take() else {
                    return Err(Error::MalformedTrace(format!("line {}: result before header", n + 1)));
                };
                if r.steps != steps.len() {
                    return Err(Error::MalformedTrace(format!(
                        "result reports {} steps but {} were logged",
                        r.steps,
                        steps.len()
                    )));
                }
                out.push(TraceRecord {
                    header,
                    steps,
                    result: r,
                });
            }
        }
    }
    if current.is_some() {
        return Err(Error::MalformedTrace("trace without result line".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct InferenceResult {
    pub answer: Answer,
    pub trajectory: Trajectory,
    pub trace: TraceRecord,
    pub costs: Costs,
}

fn build_trace(env: &Environment, instance: &QueryInstance, rollout: &Rollout, header: TraceHeader) -> TraceRecord {
    let graph = &env.graph;
    let steps = rollout
        .trajectory
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (latency, tokens) = match graph.action(s.action) {
                Action::Invoke { container, tool } => {
                    let t = graph.tool_spec(*container, *tool);
                    (t.latency, t.tokens)
                }
                Action::EarlyExit => (0.0, 0),
            };
            let memory_appended = match graph.action(s.action) {
                Action::EarlyExit => None,
                Action::Invoke { .. } => Some(
                    s.output
                        .as_ref()
                        .map(|o| summarize(o, &TemplateSummarizer::default()))
                        .unwrap_or_default(),
                ),
            };
            TraceStep {
                step: i + 1,
                position: graph.position_label(s.position).to_string(),
                legal_actions: s.dist.actions.iter().map(|&a| graph.action_name(a).to_string()).collect(),
                probs: s.dist.probs.clone(),
                chosen: graph.action_name(s.action).to_string(),
                chosen_prob: s.dist.prob(s.action),
                latency,
                tokens,
                memory_appended,
                degraded: s.degraded.clone(),
            }
        })
        .collect();
    let costs = trajectory_costs(env, &rollout.trajectory);
    let _ = instance;
    TraceRecord {
        header,
        steps,
        result: TraceResult {
            answer: rollout.answer.clone(),
            terminated_by: rollout.trajectory.terminated_by,
            steps: rollout.trajectory.steps.len(),
            total_latency: costs.latency,
            total_tokens: costs.tokens,
            normalized_cost: costs.normalized,
        },
    }
}

/// One inference run with its audit trace. Sampling draws from a generator
/// seeded with `seed`, so (checkpoint, instance, seed) fixes the result.
pub fn run_inference(
    env: &Environment,
    params: &ParamSet,
    instance: &QueryInstance,
    opts: &RolloutOptions,
    alpha: f64,
    seed: u64,
    meta: &TraceMeta,
) -> Result<InferenceResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rollout(env, params, instance, opts, alpha, &mut rng)?;
    let header = TraceHeader {
        trace_version: TRACE_VERSION,
        instance_id: instance.id.clone(),
        graph_fingerprint: env.graph.fingerprint().to_string(),
        checkpoint_id: meta.checkpoint_id.clone(),
        seed,
        tool_seed: env.tool_seed,
        temperature: alpha,
        lambda: meta.lambda,
        options: *opts,
    };
    let trace = build_trace(env, instance, &r, header);
    let costs = trajectory_costs(env, &r.trajectory);
    Ok(InferenceResult {
        answer: r.answer,
        trajectory: r.trajectory,
        trace,
        costs,
    })
}

/// Write a result's trace as line-delimited records.
pub fn emit_trace(result: &InferenceResult, sink: &mut dyn Write) -> Result<()> {
    sink.write_all(result.trace.to_jsonl().as_bytes())
        .and_then(|_| sink.flush())
        .map_err(|e| Error::SinkUnavailable(e.to_string()))
}

/// Outcome of replaying a trace against a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub steps_checked: usize,
    pub max_prob_diff: f64,
    pub mismatch: Option<String>,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

/// Recompute every logged distribution from `params` by re-executing the
/// logged actions, and compare probabilities to within `tol`.
pub fn verify_trace(
    env: &Environment,
    params: &ParamSet,
    instance: &QueryInstance,
    trace: &TraceRecord,
    tol: f64,
) -> Result<ReplayReport> {
    let h = &trace.header;
    if h.graph_fingerprint != env.graph.fingerprint() {
        return Err(Error::GraphFingerprintMismatch {
            expected: env.graph.fingerprint().to_string(),
            found: h.graph_fingerprint.clone(),
        });
    }
    let mut report = ReplayReport {
        steps_checked: 0,
        max_prob_diff: 0.0,
        mismatch: None,
    };
    let fail = |mut r: ReplayReport, msg: String| {
        r.mismatch = Some(msg);
        Ok(r)
    };
    if h.instance_id != instance.id {
        return fail(report, format!("trace is for instance `{}`", h.instance_id));
    }
    let mut env = env.clone();
    env.tool_seed = h.tool_seed;
    let mut ep = Episode::new(&env, instance);
    for s in &trace.steps {
        if ep.is_done() {
            return fail(report, format!("step {}: episode already finished", s.step));
        }
        let legal = ep.legal_actions(&h.options)?;
        let names: Vec<&str> = legal.iter().map(|&a| env.graph.action_name(a)).collect();
        if names != s.legal_actions.iter().map(String::as_str).collect::<Vec<_>>() {
            return fail(report, format!("step {}: legal action sets differ", s.step));
        }
        let features = ep.features();
        let fwd = policy::forward(params, &features, &legal, h.temperature)?;
        for (p, q) in fwd.dist.probs.iter().zip(&s.probs) {
            let d = (p - q).abs();
            if !(d <= report.max_prob_diff) {
                report.max_prob_diff = if d.is_nan() { f64::INFINITY } else { d };
            }
        }
        report.steps_checked += 1;
        if !(report.max_prob_diff <= tol) {
            let msg = format!("step {}: probabilities differ by {:e}", s.step, report.max_prob_diff);
            return fail(report, msg);
        }
        let Some(action) = env.graph.action_by_name(&s.chosen) else {
            return fail(report, format!("step {}: unknown action `{}`", s.step, s.chosen));
        };
        ep.apply(features, fwd.dist, action)?;
    }
    let traj = ep.finish();
    if traj.terminated_by != trace.result.terminated_by {
        return fail(report, "termination differs".into());
    }
    if synthesize_answer(&traj) != trace.result.answer {
        return fail(report, "synthesized answer differs".into());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{generate_suite, SuiteConfig};
    use crate::policy::{init_params, ModelConfig};

    fn setup() -> (Environment, ParamSet, Vec<QueryInstance>) {
        let env = Environment::standard();
        let params = init_params(&ModelConfig::standard(env.graph.num_actions()), 7);
        let suite = generate_suite(
            &env.graph,
            1,
            &SuiteConfig {
                size: 5,
                ..SuiteConfig::default()
            },
        )
        .unwrap();
        (env, params, suite)
    }

    #[test]
    fn zero_step_budget_gives_empty_trajectory() {
        let (mut env, params, suite) = setup();
        env.t_max = 0;
        let r = rollout(&env, &params, &suite[0], &RolloutOptions::default(), 0.8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.trajectory.steps.is_empty());
        assert_eq!(r.trajectory.terminated_by, Termination::MaxSteps);
        assert!(r.answer.is_empty());
    }

    #[test]
    fn runs_halt_and_are_reproducible() {
        let (env, params, suite) = setup();
        for q in &suite {
            let a = run_inference(&env, &params, q, &RolloutOptions::default(), 0.8, 3, &TraceMeta::default()).unwrap();
            let b = run_inference(&env, &params, q, &RolloutOptions::default(), 0.8, 3, &TraceMeta::default()).unwrap();
            assert!(a.trajectory.steps.len() <= env.t_max);
            assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
            assert_eq!(a.trace.steps.len(), a.trajectory.steps.len());
            for s in &a.trace.steps {
                assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(s.chosen_prob > 0.0);
            }
        }
    }

    #[test]
    fn trace_round_trips_and_replays() {
        let (env, params, suite) = setup();
        let r = run_inference(&env, &params, &suite[1], &RolloutOptions::default(), 0.8, 11, &TraceMeta::default()).unwrap();
        let mut buf = Vec::new();
        emit_trace(&r, &mut buf).unwrap();
        let parsed = TraceRecord::parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed, r.trace);
        let rep = verify_trace(&env, &params, &suite[1], &parsed, 1e-9).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.steps_checked, r.trajectory.steps.len());

        let other = init_params(&ModelConfig::standard(env.graph.num_actions()), 8);
        assert!(!verify_trace(&env, &other, &suite[1], &parsed, 1e-9).unwrap().passed());
    }

    #[test]
    fn malformed_traces_rejected() {
        assert!(matches!(parse_traces(r#"{"kind":"step"}"#), Err(Error::MalformedTrace(_))));
        let (env, params, suite) = setup();
        let r = run_inference(&env, &params, &suite[0], &RolloutOptions::default(), 0.8, 1, &TraceMeta::default()).unwrap();
        let text = r.trace.to_jsonl();
        let truncated: String = text.lines().take(1).map(|l| format!("{l}\n")).collect();
        assert!(parse_traces(&truncated).is_err());
        let bumped = text.replacen("\"trace_version\":1", "\"trace_version\":2", 1);
        assert!(matches!(parse_traces(&bumped), Err(Error::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn masked_exit_forces_progress() {
        let (env, params, suite) = setup();
        let opts = RolloutOptions {
            early_exit: false,
            ..RolloutOptions::default()
        };
        let mut ep = Episode::new(&env, &suite[0]);
        assert!(!ep.legal_actions(&opts).unwrap().contains(&env.graph.exit_action()));
        let r = rollout(&env, &params, &suite[0], &opts, 0.8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // exit is only taken at a sink, where it is the sole legal action
        let last = r.trajectory.steps.last().unwrap();
        if last.action == env.graph.exit_action() {
            assert_eq!(last.dist.actions.len(), 1);
        }
        ep = Episode::new(&env, &suite[0]);
        let min = RolloutOptions {
            min_steps_before_exit: 1,
            ..RolloutOptions::default()
        };
        assert!(!ep.legal_actions(&min).unwrap().contains(&env.graph.exit_action()));
    }

    #[test]
    fn sink_exit_is_forced_and_marginal_sums_to_one() {
        let (env, params, suite) = setup();
        let all = enumerate_trajectories(&env, &params, &suite[0], &RolloutOptions::default(), 1.0, 100_000).unwrap();
        let total: f64 = all.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let m = exact_marginal(&all);
        assert!((m.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(total_variation(&m, &m), 0.0);
    }
}
