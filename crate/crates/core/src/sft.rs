//! Behavior cloning on expert trajectories.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{compile_steps, sequence_logprob, Decision, PolicyParams};
use crate::rng::named_stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training stops once the epoch-over-epoch loss change falls below this.
    pub tolerance: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            learning_rate: 0.1,
            epochs: 40,
            batch_size: 32,
            tolerance: 1e-4,
        }
    }
}

/// Loss increase tolerated before an epoch is rolled back.
pub const INCREASE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_action_agreement: f64,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<SftEpoch>,
}

/// Teacher-forced decisions of each trajectory, in input order.
pub fn compile_trajectories<E: Environment>(
    env: &E,
    d: usize,
    trajectories: &[Trajectory],
) -> Result<Vec<Vec<Decision>>> {
    trajectories
        .par_iter()
        .map(|t| compile_steps(env, d, &t.instruction, &[], &t.steps))
        .collect()
}

/// Sum of `f(item)` over items, reduced in input order.
pub(crate) fn ordered_sum<T: Sync>(items: &[T], f: impl Fn(&T) -> f64 + Sync) -> f64 {
    let parts: Vec<f64> = items.par_iter().map(&f).collect();
    parts.iter().sum()
}

/// Sum of per-item gradient contributions, reduced in input order so the
/// result does not depend on the thread count.
pub(crate) fn ordered_grad<T: Sync>(
    params: &PolicyParams,
    items: &[T],
    f: impl Fn(&T, &mut [f64]) + Sync,
) -> Vec<f64> {
    let parts: Vec<Vec<f64>> = items
        .par_iter()
        .map(|item| {
            let mut g = params.zero_grad();
            f(item, &mut g);
            g
        })
        .collect();
    let mut total = params.zero_grad();
    for g in parts {
        for (t, x) in total.iter_mut().zip(&g) {
            *t += x;
        }
    }
    total
}

/// Mean negative log-likelihood of the trajectories.
pub fn sft_loss(params: &PolicyParams, data: &[Vec<Decision>]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    -ordered_sum(data, |seq| sequence_logprob(params, seq)) / data.len() as f64
}

/// Gradient of [`sft_loss`] over the given trajectories.
pub fn sft_gradient(params: &PolicyParams, data: &[&Vec<Decision>]) -> Vec<f64> {
    let scale = -1.0 / data.len().max(1) as f64;
    ordered_grad(params, data, |seq, g| {
        for d in seq.iter() {
            d.accumulate_grad(params, scale, g);
        }
    })
}

/// Fraction of steps on which the greedy action equals the expert's.
pub fn action_agreement(params: &PolicyParams, data: &[Vec<Decision>]) -> f64 {
    let steps: usize = data.iter().map(Vec::len).sum();
    if steps == 0 {
        return 1.0;
    }
    let hits = ordered_sum(data, |seq| {
        seq.iter().filter(|d| d.greedy_agrees(params)).count() as f64
    });
    hits / steps as f64
}

/// Mini-batch gradient descent on the SFT loss.
///
/// An epoch whose loss rises by more than [`INCREASE_TOLERANCE`] is undone
/// and the learning rate halved; the retry counts against the epoch cap.
pub fn train_sft(init: PolicyParams, data: &[Vec<Decision>], config: &SftConfig, seed: u64) -> Result<SftOutcome> {
    if data.is_empty() {
        return Err(Error::InsufficientData("SFT needs at least one trajectory".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::config("sft.batch_size", "must be positive"));
    }
    let mut params = init;
    let mut lr = config.learning_rate;
    let mut prev = sft_loss(&params, data);
    let mut metrics = vec![SftEpoch {
        epoch: 0,
        loss: prev,
        train_action_agreement: action_agreement(&params, data),
    }];
    for epoch in 1..=config.epochs {
        let snapshot = params.clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut named_stream(seed, "sft-shuffle", epoch as u64));
        for batch in order.chunks(config.batch_size) {
            let items: Vec<&Vec<Decision>> = batch.iter().map(|&i| &data[i]).collect();
            let grad = sft_gradient(&params, &items);
            params.descend(&grad, lr);
        }
        let loss = sft_loss(&params, data);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: format!("SFT loss {loss} at learning rate {lr}"),
            });
        }
        if loss > prev + INCREASE_TOLERANCE {
            log::warn!("sft epoch {epoch}: loss rose {prev:.6} -> {loss:.6}, halving learning rate");
            params = snapshot;
            lr /= 2.0;
            continue;
        }
        metrics.push(SftEpoch {
            epoch,
            loss,
            train_action_agreement: action_agreement(&params, data),
        });
        log::info!("sft epoch {epoch}: loss {loss:.6}");
        let converged = (prev - loss).abs() < config.tolerance;
        prev = loss;
        if converged {
            break;
        }
    }
    Ok(SftOutcome { params, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PrefixView;
    use crate::toy::{random_toy_task, toy_expert, ToyEnv};

    fn toy_data(n: usize) -> Vec<Trajectory> {
        (0..n)
            .map(|i| toy_expert(&random_toy_task(&format!("toy-{i:04}"), 9, i as u64)).unwrap())
            .collect()
    }

    #[test]
    fn uniform_loss_is_three_ln4() {
        let data = compile_trajectories(&ToyEnv, 32, &toy_data(1)).unwrap();
        let loss = sft_loss(&PolicyParams::zeros(32, 4), &data);
        assert!((loss - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((loss - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn loss_is_mean_negative_logprob() {
        let trajs = toy_data(5);
        let data = compile_trajectories(&ToyEnv, 32, &trajs).unwrap();
        let mut p = PolicyParams::zeros(32, 4);
        for (i, w) in p.weights_mut().iter_mut().enumerate() {
            *w = ((i * 7) % 13) as f64 * 0.05 - 0.3;
        }
        let direct: f64 = trajs
            .iter()
            .map(|t| -crate::policy::trajectory_logprob(&p, &ToyEnv, PrefixView { instruction: &t.instruction, steps: &[] }, &t.suffix(1)).unwrap())
            .sum::<f64>()
            / 5.0;
        assert!((sft_loss(&p, &data) - direct).abs() < 1e-12);
    }

    #[test]
    fn training_decreases_loss_and_is_deterministic() {
        let data = compile_trajectories(&ToyEnv, 64, &toy_data(40)).unwrap();
        let cfg = SftConfig {
            epochs: 5,
            ..SftConfig::default()
        };
        let a = train_sft(PolicyParams::zeros(64, 4), &data, &cfg, 1).unwrap();
        let b = train_sft(PolicyParams::zeros(64, 4), &data, &cfg, 1).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.metrics.last().unwrap().loss < a.metrics[0].loss);
        for w in a.metrics.windows(2) {
            assert!(w[1].loss <= w[0].loss + INCREASE_TOLERANCE);
        }
    }

    #[test]
    fn empty_dataset_is_refused() {
        assert!(train_sft(PolicyParams::zeros(4, 4), &[], &SftConfig::default(), 0).is_err());
    }
}
