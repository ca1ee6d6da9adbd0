#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use supernet_core::encoder::FEATURE_DIM;
use supernet_core::environment::{generate_suite, CostWeights, Environment, QueryInstance, SuiteConfig, ToolRegistry};
use supernet_core::optim::ParamSet;
use supernet_core::policy::{init_params, ModelConfig};
use supernet_core::supernet::{build_graph, ContainerSpec, ContainerType, EdgeSpec, RoutingPolicy, SupernetSpec};

/// Random DAG with `n` containers of distinct types, each reachable from
/// container 0, holding one or two standard tools.
pub fn random_spec<R: Rng>(n: usize, rng: &mut R) -> SupernetSpec {
    let registry = ToolRegistry::standard();
    let mut types = ContainerType::ALL.to_vec();
    types.shuffle(rng);
    let containers: Vec<ContainerSpec> = types[..n]
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut tools: Vec<String> = registry.iter().filter(|s| s.ctype == t).map(|s| s.id.clone()).collect();
            tools.shuffle(rng);
            tools.truncate(rng.gen_range(1..=2));
            ContainerSpec {
                id: format!("c{i}"),
                ctype: t,
                tools,
            }
        })
        .collect();
    let mut edges = Vec::new();
    for j in 1..n {
        let parent = rng.gen_range(0..j);
        for i in 0..j {
            if i == parent || rng.gen_bool(0.3) {
                edges.push(EdgeSpec {
                    from: format!("c{i}"),
                    to: format!("c{j}"),
                    routing: RoutingPolicy::All,
                });
            }
        }
    }
    SupernetSpec {
        containers,
        edges,
        entry: "c0".into(),
        tools: Vec::new(),
    }
}

pub fn env_of(spec: &SupernetSpec, t_max: usize) -> Environment {
    let graph = build_graph(spec, &ToolRegistry::standard()).expect("random spec is valid");
    Environment::new(graph, t_max, CostWeights::default())
}

pub fn small_suite(env: &Environment, size: usize, seed: u64) -> Vec<QueryInstance> {
    let config = SuiteConfig {
        size,
        plan_len: (1, env.graph.containers().len()),
        simple_fraction: 0.2,
        safety_fraction: 0.0,
        ..SuiteConfig::default()
    };
    generate_suite(&env.graph, seed, &config).expect("suite generates")
}

pub fn small_model(env: &Environment, hidden: usize, proj: usize) -> ModelConfig {
    ModelConfig {
        image_dim: FEATURE_DIM,
        text_dim: FEATURE_DIM,
        memory_dim: FEATURE_DIM,
        image_out: proj,
        query_out: proj,
        memory_out: proj,
        hidden,
        num_actions: env.graph.num_actions(),
    }
}

pub fn small_params(env: &Environment, hidden: usize, proj: usize, seed: u64) -> ParamSet {
    init_params(&small_model(env, hidden, proj), seed)
}

/// Parameters scaled up so the policy is far from uniform.
pub fn sharpened(mut params: ParamSet, factor: f64) -> ParamSet {
    for t in &mut params.tensors {
        t.value.data.iter_mut().for_each(|v| *v *= factor);
    }
    params
}

#[derive(Debug, Default)]
pub struct FdStats {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because a ReLU switched inside `[x−h, x+h]`.
    pub kinks: usize,
}

/// Relative error between the analytic gradient and central differences on
/// `per_tensor` random coordinates of every tensor. The denominator is
/// floored at `floor` so coordinates with vanishing gradient compare absolutely.
pub fn fd_check<R: Rng>(
    objective: &dyn supernet_core::optim::Objective,
    params: &ParamSet,
    h: f64,
    floor: f64,
    per_tensor: usize,
    rng: &mut R,
) -> FdStats {
    let (f0, analytic) = objective.loss_and_grad(params).expect("objective evaluates");
    let mut stats = FdStats::default();
    let mut p = params.clone();
    for ti in 0..params.tensors.len() {
        let len = params.at(ti).data.len();
        for _ in 0..per_tensor.min(len) {
            let k = rng.gen_range(0..len);
            let x = params.at(ti).data[k];
            p.at_mut(ti).data[k] = x + h;
            let up = objective.loss(&p).unwrap();
            p.at_mut(ti).data[k] = x - h;
            let dn = objective.loss(&p).unwrap();
            p.at_mut(ti).data[k] = x;
            let fd = (up - dn) / (2.0 * h);
            let an = analytic.at(ti).data[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
            // one-sided slopes disagree at first order only across a kink
            let (fwd, bwd) = ((up - f0) / h, (f0 - dn) / h);
            if rel > 1e-4 && (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(floor) {
                stats.kinks += 1;
                continue;
            }
            stats.checked += 1;
            stats.max_rel_err = stats.max_rel_err.max(rel);
        }
    }
    stats
}
