mod common;

use common::{env_of, random_spec, sharpened, small_params, small_suite};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use supernet_core::environment::{expert_action, synthesize_answer, utility, Environment};
use supernet_core::optim::{Objective, ParamSet};
use supernet_core::policy::{self, trajectory_logprob, Termination};
use supernet_core::runtime::{enumerate_trajectories, rollout, run_inference, Episode, RolloutOptions, TraceMeta};
use supernet_core::supernet::{Action, Position};
use supernet_core::training::{cpr_weights, episode_reward, BcObjective, ReinforceObjective, RewardSpec};

fn setup(seed: u64, n: usize, scale: f64) -> (Environment, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = env_of(&random_spec(n, &mut rng), n.max(2));
    let params = sharpened(small_params(&env, 8, 4, seed), scale);
    (env, params)
}

fn options(exit: bool, revisit: bool) -> RolloutOptions {
    RolloutOptions {
        early_exit: exit,
        allow_revisit: revisit,
        ..RolloutOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn graph_structure(seed in any::<u64>(), n in 1usize..=7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = env_of(&random_spec(n, &mut rng), 3);
        let g = &env.graph;
        let order = g.topological_order();
        prop_assert_eq!(order.len(), n);
        for e in g.edges() {
            let (a, b) = (order.iter().position(|&c| c == e.from), order.iter().position(|&c| c == e.to));
            prop_assert!(a < b);
        }
        let positions = std::iter::once(Position::Start).chain((0..n).map(Position::At));
        for pos in positions {
            let legal = g.legal_actions(pos).unwrap();
            prop_assert_eq!(&legal, &g.legal_actions(pos).unwrap());
            prop_assert_eq!(*legal.last().unwrap(), g.exit_action());
            prop_assert!(legal.len() <= g.max_legal_actions());
        }
    }

    #[test]
    fn trajectory_measure_sums_to_one(seed in any::<u64>(), n in 1usize..=4, scale in 0.5f64..6.0, alpha in 0.5f64..2.0,
                                     exit in any::<bool>(), revisit in any::<bool>()) {
        let (env, params) = setup(seed, n, scale);
        let suite = small_suite(&env, 1, seed);
        let opts = options(exit, revisit);
        let all = enumerate_trajectories(&env, &params, &suite[0], &opts, alpha, 10_000).unwrap();
        let total: f64 = all.iter().map(|(_, p)| p).sum();
        prop_assert!((total - 1.0).abs() <= 1e-6, "sum {}", total);
        for (t, p) in &all {
            prop_assert!((trajectory_logprob(t).unwrap().exp() - p).abs() <= 1e-12);
        }
    }

    #[test]
    fn trajectories_are_well_formed(seed in any::<u64>(), n in 1usize..=5, exit in any::<bool>()) {
        let (env, params) = setup(seed, n, 2.0);
        let suite = small_suite(&env, 3, seed);
        let opts = options(exit, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for q in &suite {
            let t = rollout(&env, &params, q, &opts, 1.0, &mut rng).unwrap().trajectory;
            prop_assert!(t.steps.len() <= env.t_max);
            let exits: Vec<usize> = t.steps.iter().enumerate()
                .filter(|(_, s)| matches!(env.graph.action(s.action), Action::EarlyExit))
                .map(|(i, _)| i).collect();
            prop_assert!(exits.len() <= 1);
            if let Some(&i) = exits.first() {
                prop_assert_eq!(i + 1, t.steps.len());
                prop_assert_eq!(t.terminated_by, Termination::EarlyExit);
            }
            // replay the decisions: supports must match the legal sets
            let mut ep = Episode::new(&env, q);
            for s in &t.steps {
                let legal = ep.legal_actions(&opts).unwrap();
                prop_assert_eq!(&s.dist.actions, &legal);
                let full = s.dist.full_probs();
                prop_assert_eq!(full.iter().filter(|&&p| p > 0.0).count() <= legal.len(), true);
                for (a, p) in full.iter().enumerate() {
                    if !legal.iter().any(|l| l.0 == a) {
                        prop_assert_eq!(*p, 0.0);
                    }
                }
                prop_assert!((s.dist.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                ep.apply(s.features.clone(), s.dist.clone(), s.action).unwrap();
            }
        }
    }

    #[test]
    fn path_ranking_weights_normalize_and_shift(r in prop::collection::vec(-5.0f64..5.0, 2..12), c in -100.0f64..100.0, a in 0.05f64..5.0) {
        let w = cpr_weights(&r, a);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        for (x, y) in w.iter().zip(cpr_weights(&shifted, a)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn reward_is_non_increasing_in_lambda_and_gamma(cost in 0.0f64..1.0, h in 0.0f64..3.0,
                                                     l1 in 0.0f64..1.0, dl in 0.0f64..1.0, g1 in 0.0f64..1.0, dg in 0.0f64..1.0) {
        let truth: supernet_core::environment::Answer = [("finding".to_string(), "edema".to_string())].into();
        let answer = truth.clone();
        let spec = |lambda, gamma| RewardSpec { lambda, gamma, ..RewardSpec::default() };
        let base = episode_reward(&answer, &truth, cost, &spec(l1, g1), h);
        prop_assert!(episode_reward(&answer, &truth, cost, &spec(l1 + dl, g1), h) <= base);
        prop_assert!(episode_reward(&answer, &truth, cost, &spec(l1, g1 + dg), h) <= base);
    }

    #[test]
    fn entropy_bonus_is_additive(seed in any::<u64>(), n in 1usize..=4, beta in 0.001f64..0.1) {
        let (env, params) = setup(seed, n, 2.0);
        let suite = small_suite(&env, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<_> = suite.iter().enumerate()
            .map(|(i, q)| (rollout(&env, &params, q, &RolloutOptions::default(), 1.0, &mut rng).unwrap().trajectory, i as f64 - 1.0))
            .collect();
        let zero_adv: Vec<_> = eps.iter().map(|(t, _)| (t.clone(), 0.0)).collect();
        let g = |e: &[_], b| ReinforceObjective { episodes: e, alpha: 1.0, entropy_coef: b }.loss_and_grad(&params).unwrap().1;
        let (both, score, ent) = (g(&eps, beta), g(&eps, 0.0), g(&zero_adv, beta));
        for i in 0..both.tensors.len() {
            for ((x, y), z) in both.at(i).data.iter().zip(&score.at(i).data).zip(&ent.at(i).data) {
                prop_assert!((x - y - z).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn inference_halts_and_reproduces(seed in any::<u64>(), n in 1usize..=5, s in any::<u64>()) {
        let (env, params) = setup(seed, n, 2.0);
        let q = &small_suite(&env, 1, seed)[0];
        let meta = TraceMeta { checkpoint_id: "x".into(), lambda: 0.0 };
        let a = run_inference(&env, &params, q, &RolloutOptions::default(), 0.8, s, &meta).unwrap();
        let b = run_inference(&env, &params, q, &RolloutOptions::default(), 0.8, s, &meta).unwrap();
        prop_assert!(a.trajectory.steps.len() <= env.t_max);
        prop_assert_eq!(a.trace.steps.len(), a.trajectory.steps.len());
        prop_assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
    }
}

#[test]
fn expert_realizes_every_standard_instance_with_positive_step_costs() {
    let env = Environment::standard();
    let suite = supernet_core::environment::generate_suite(&env.graph, 11, &Default::default()).unwrap();
    for q in &suite {
        let mut ep = Episode::new(&env, q);
        while !ep.is_done() {
            let legal = ep.legal_actions(&RolloutOptions::default()).unwrap();
            let a = expert_action(&env.graph, ep.state(), q).unwrap();
            let c = env.step_cost(a);
            match env.graph.action(a) {
                Action::EarlyExit => assert_eq!(c, 0.0),
                Action::Invoke { .. } => assert!(c > 0.0),
            }
            let f = ep.features();
            ep.apply(f, policy::ActionDistribution::point_mass(&legal, a, env.graph.num_actions()), a).unwrap();
        }
        let t = ep.finish();
        assert_eq!(utility(&synthesize_answer(&t), &q.truth.answer_fields), 1.0, "{}", q.id);
    }
}

#[test]
fn bc_loss_is_zero_exactly_on_forced_decisions() {
    let (env, params) = setup(5, 1, 1.0);
    let suite = small_suite(&env, 6, 5);
    let pairs: Vec<_> = suite
        .iter()
        .flat_map(|q| supernet_core::training::expert_rollout(&env, q, &RolloutOptions::default()).unwrap().0)
        .collect();
    let (forced, free): (Vec<_>, Vec<_>) = pairs.iter().partition(|p| p.legal.len() == 1);
    assert!(!forced.is_empty() && !free.is_empty());
    assert_eq!(BcObjective::new(forced, 1.0).unwrap().loss(&params).unwrap(), 0.0);
    for p in free {
        assert!(BcObjective::new(vec![p], 1.0).unwrap().loss(&params).unwrap() > 0.0);
    }
}

/// Score-function estimate of ∇E[R] from samples agrees with the exact
/// gradient summed over every trajectory.
#[test]
fn reinforce_gradient_is_unbiased() {
    let (env, params) = setup(21, 3, 1.5);
    let q = &small_suite(&env, 1, 21)[0];
    let opts = RolloutOptions::default();
    let reward = |t: &policy::Trajectory| {
        utility(&synthesize_answer(t), &q.truth.answer_fields) - 0.2 * env.normalized_cost(&t.actions())
    };
    let all = enumerate_trajectories(&env, &params, q, &opts, 1.0, 10_000).unwrap();
    let n = all.len() as f64;
    let exact_eps: Vec<_> = all.iter().map(|(t, p)| (t.clone(), n * p * reward(t))).collect();
    let exact = ReinforceObjective { episodes: &exact_eps, alpha: 1.0, entropy_coef: 0.0 }.loss_and_grad(&params).unwrap().1;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 20_000;
    let samples: Vec<_> = (0..m)
        .map(|_| {
            let t = rollout(&env, &params, q, &opts, 1.0, &mut rng).unwrap().trajectory;
            let r = reward(&t);
            (t, r)
        })
        .collect();
    let mc = ReinforceObjective { episodes: &samples, alpha: 1.0, entropy_coef: 0.0 }.loss_and_grad(&params).unwrap().1;
    let mut diff = exact.clone();
    diff.add_scaled(&mc, -1.0);
    let rel = diff.global_norm() / exact.global_norm();
    assert!(rel < 0.05, "relative deviation {rel}, {} trajectories", all.len());
}

#[test]
fn multi_step_plans_are_not_solvable_in_one_step() {
    let env = Environment::standard();
    let config = supernet_core::environment::SuiteConfig {
        size: 60,
        plan_len: (2, 4),
        simple_fraction: 0.0,
        ..Default::default()
    };
    let suite = supernet_core::environment::generate_suite(&env.graph, 3, &config).unwrap();
    let opts = RolloutOptions::default();
    for q in &suite {
        let first = Episode::new(&env, q).legal_actions(&opts).unwrap();
        for &a in &first {
            let mut ep = Episode::new(&env, q);
            let f = ep.features();
            ep.apply(f, policy::ActionDistribution::point_mass(&first, a, env.graph.num_actions()), a).unwrap();
            let t = ep.finish();
            assert!(utility(&synthesize_answer(&t), &q.truth.answer_fields) < 1.0, "{} solved by {:?}", q.id, a);
        }
    }
}
