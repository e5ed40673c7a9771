use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::env::{self, Action, PrefixView, TrajectorySuffix};
use crate::toy::{random_toy_task, ToyAction, ToyEnv};

fn random_params(d: usize, n: usize, seed: u64, scale: f64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..d * n).map(|_| rng.gen_range(-scale..scale)).collect();
    PolicyParams::from_weights(d, n, w, 0).unwrap()
}

fn toy_rollout(seed: u64) -> crate::env::Trajectory {
    let task = random_toy_task("toy-0003", seed, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    env::rollout(&ToyEnv, &env::UniformPolicy, PrefixView { instruction: &task, steps: &[] }, 1.0, &mut rng)
        .unwrap()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn zero_weights_give_uniform_logprobs() {
    let traj = toy_rollout(1);
    let p = PolicyParams::zeros(64, 4);
    let state = env::replay(&ToyEnv, traj.prefix(1)).unwrap();
    let legal = ToyEnv.legal_actions(&state.inner);
    let lp = action_logprobs(&p, traj.prefix(1), &legal).unwrap();
    for l in lp {
        assert!((l + 4f64.ln()).abs() < 1e-15);
    }
    let full = trajectory_logprob(&p, &ToyEnv, traj.prefix(1), &traj.suffix(1)).unwrap();
    assert!((full + 3.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn softmax_is_shift_invariant_and_saturates() {
    let a = log_softmax(&[0.3, -1.2, 2.0]);
    let b = log_softmax(&[100.3, 98.8, 102.0]);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    let c = log_softmax(&[1e6, 0.0, 0.0]);
    assert!(c[0].exp() > 1.0 - 1e-12);
    assert!(c[1].exp() < 1e-300);
}

#[test]
fn empty_legal_set_is_a_contract_error() {
    let traj = toy_rollout(2);
    let p = PolicyParams::zeros(64, 4);
    assert!(matches!(
        action_logprobs(&p, traj.prefix(1), &[]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn empty_suffix_has_zero_logprob_and_gradient() {
    let traj = toy_rollout(3);
    let p = random_params(64, 4, 3, 1.0);
    let empty = TrajectorySuffix {
        steps: vec![],
        outcome_reward: traj.outcome_reward,
    };
    assert_eq!(trajectory_logprob(&p, &ToyEnv, traj.view(), &empty).unwrap(), 0.0);
    assert!(logprob_gradient(&p, &ToyEnv, traj.view(), &empty)
        .unwrap()
        .iter()
        .all(|&g| g == 0.0));
}

#[test]
fn trajectory_logprob_is_sum_of_stepwise_logprobs() {
    let traj = toy_rollout(4);
    let p = random_params(64, 4, 4, 0.7);
    let mut state = env::reset(&ToyEnv, &traj.instruction).unwrap();
    let mut total = 0.0;
    for t in 1..=traj.len() {
        let legal = ToyEnv.legal_actions(&state.inner);
        let lp = action_logprobs(&p, traj.prefix(t), &legal).unwrap();
        let exp_sum: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((exp_sum - 1.0).abs() < 1e-12);
        let a = &traj.steps[t - 1].action;
        total += lp[env::legal_index(&legal, a).unwrap()];
        state = env::step(&ToyEnv, &state, a).unwrap().0;
    }
    let direct = trajectory_logprob(&p, &ToyEnv, traj.prefix(1), &traj.suffix(1)).unwrap();
    assert!((direct - total).abs() < 1e-12);
}

#[test]
fn illegal_stored_action_is_data_corruption() {
    let mut traj = toy_rollout(5);
    traj.steps[1].action = Action::Toy(ToyAction { choice: 7 });
    let p = PolicyParams::zeros(64, 4);
    assert!(matches!(
        trajectory_logprob(&p, &ToyEnv, traj.prefix(1), &traj.suffix(1)),
        Err(Error::DataCorruption(_))
    ));
}

#[test]
fn two_action_uniform_gradient_closed_form() {
    let features = FeatureVector {
        indices: vec![1, 3],
        values: vec![2.0, -1.0],
    };
    let d = Decision {
        features,
        legal: vec![0, 2],
        chosen: 0,
    };
    let p = PolicyParams::zeros(4, 3);
    let mut g = p.zero_grad();
    d.accumulate_grad(&p, 1.0, &mut g);
    // Row i, column a lives at i * 3 + a.
    assert_eq!(g[3], 1.0);
    assert_eq!(g[5], -1.0);
    assert_eq!(g[9], -0.5);
    assert_eq!(g[11], 0.5);
    // Column 1 is illegal and receives nothing.
    assert!((0..4).all(|i| g[i * 3 + 1] == 0.0));
}

#[test]
fn gradient_matches_central_differences() {
    for seed in 0..10u64 {
        let traj = toy_rollout(100 + seed);
        let mut p = random_params(32, 4, seed, 0.8);
        let t = 1 + (seed as usize % traj.len());
        let prefix = traj.prefix(t);
        let suffix = traj.suffix(t);
        let analytic = logprob_gradient(&p, &ToyEnv, prefix, &suffix).unwrap();
        let h = 1e-5;
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let w0 = p.weights()[i];
            p.weights_mut()[i] = w0 + h;
            let up = trajectory_logprob(&p, &ToyEnv, prefix, &suffix).unwrap();
            p.weights_mut()[i] = w0 - h;
            let down = trajectory_logprob(&p, &ToyEnv, prefix, &suffix).unwrap();
            p.weights_mut()[i] = w0;
            numeric[i] = (up - down) / (2.0 * h);
        }
        assert!(max_rel_err(&analytic, &numeric) <= 1e-4);
    }
}

#[test]
fn greedy_agreement_uses_lowest_index_on_ties() {
    let d = Decision {
        features: FeatureVector {
            indices: vec![0],
            values: vec![1.0],
        },
        legal: vec![0, 1],
        chosen: 0,
    };
    let p = PolicyParams::zeros(1, 2);
    assert!(d.greedy_agrees(&p));
    let d1 = Decision { chosen: 1, ..d };
    assert!(!d1.greedy_agrees(&p));
}
