mod common;

use common::{env_of, fd_check, random_spec, sharpened, small_params, small_suite};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supernet_core::optim::{Objective, ParamSet};
use supernet_core::runtime::{rollout, RolloutOptions};
use supernet_core::training::{expert_rollout, BcObjective, CprBatch, CprObjective, ReinforceObjective};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

struct Case {
    env: supernet_core::environment::Environment,
    suite: Vec<supernet_core::environment::QueryInstance>,
    params: ParamSet,
    alpha: f64,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4);
    let env = env_of(&random_spec(n, &mut rng), n.max(2));
    let suite = small_suite(&env, 4, seed);
    let hidden = rng.gen_range(2..=16);
    let proj = rng.gen_range(2..=6);
    let params = sharpened(small_params(&env, hidden, proj, seed), rng.gen_range(1.0..3.0));
    Case {
        env,
        suite,
        params,
        alpha: rng.gen_range(0.5..2.0),
    }
}

fn check(name: &str, seed: u64, obj: &dyn Objective, params: &ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let s = fd_check(obj, params, H, FLOOR, 40, &mut rng);
    assert!(s.checked > 0, "{name} seed {seed}: nothing checked");
    assert!(s.kinks * 20 <= s.checked + s.kinks, "{name} seed {seed}: too many kinks {s:?}");
    assert!(s.max_rel_err <= TOL, "{name} seed {seed}: {s:?}");
}

#[test]
fn behavior_cloning_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let c = case(seed);
        let opts = RolloutOptions::default();
        let pairs: Vec<_> = c
            .suite
            .iter()
            .flat_map(|q| expert_rollout(&c.env, q, &opts).unwrap().0)
            .collect();
        let obj = BcObjective::new(pairs.iter().collect(), c.alpha).unwrap();
        check("bc", seed, &obj, &c.params);
    }
}

#[test]
fn path_ranking_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let c = case(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = RolloutOptions::default();
        let batches: Vec<CprBatch> = c.suite[..2]
            .iter()
            .map(|q| {
                let trajs: Vec<_> = (0..4)
                    .map(|_| rollout(&c.env, &c.params, q, &opts, c.alpha, &mut rng).unwrap().trajectory)
                    .collect();
                let rewards = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
                CprBatch::new(trajs, rewards, 0.5).unwrap()
            })
            .collect();
        let obj = CprObjective {
            batches: &batches,
            alpha: c.alpha,
        };
        check("cpr", seed, &obj, &c.params);
    }
}

#[test]
fn reinforce_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let c = case(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let opts = RolloutOptions::default();
        let episodes: Vec<_> = c
            .suite
            .iter()
            .map(|q| {
                let t = rollout(&c.env, &c.params, q, &opts, c.alpha, &mut rng).unwrap().trajectory;
                (t, rng.gen_range(-1.0..1.0))
            })
            .collect();
        let obj = ReinforceObjective {
            episodes: &episodes,
            alpha: c.alpha,
            entropy_coef: 0.05,
        };
        check("reinforce", seed, &obj, &c.params);
    }
}

struct Skewed<'a>(&'a dyn Objective);

impl Objective for Skewed<'_> {
    fn loss_and_grad(&self, params: &ParamSet) -> supernet_core::Result<(f64, supernet_core::optim::GradSet)> {
        let (l, mut g) = self.0.loss_and_grad(params)?;
        g.scale(1.001);
        Ok((l, g))
    }
}

#[test]
fn checker_rejects_a_slightly_wrong_gradient() {
    let c = case(3);
    let pairs: Vec<_> = c
        .suite
        .iter()
        .flat_map(|q| expert_rollout(&c.env, q, &RolloutOptions::default()).unwrap().0)
        .collect();
    let obj = BcObjective::new(pairs.iter().collect(), c.alpha).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = fd_check(&Skewed(&obj), &c.params, H, FLOOR, 40, &mut rng);
    assert!(s.max_rel_err > TOL, "{s:?}");
}
