//! Distilled step reward model: a linear regressor from the featurized
//! history through an action to that action's step reward, trained with
//! squared error on scorer-labeled steps.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::store::write_atomic;
use crate::env::{self, Environment, Policy, PrefixView, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{featurize_outcome, FeatureVector};
use crate::rng::{fnv1a, named_stream};
use crate::scorer::{score_trajectory_steps, ScoreMethod, ScoredStep, StepRewardEstimate, StepScorer};

/// Fewest distinct tasks for which a 90/10 split is attempted.
pub const MIN_TASKS: usize = 10;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmConfig {
    pub d: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of tasks held out for the reported generalization error.
    pub heldout_fraction: f64,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            d: crate::policy::DEFAULT_FEATURE_DIM,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 32,
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub d: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// One training example: history features and the scorer's label.
#[derive(Debug, Clone, PartialEq)]
pub struct RmExample {
    pub features: FeatureVector,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmEpoch {
    pub epoch: usize,
    pub train_mse: f64,
}

#[derive(Debug, Clone)]
pub struct RmOutcome {
    pub model: RewardModel,
    pub metrics: Vec<RmEpoch>,
    pub initial_train_mse: f64,
    pub train_mse: f64,
    pub heldout_mse: f64,
    /// Variance of the held-out labels, the error of the best constant.
    pub heldout_label_variance: f64,
    pub heldout_tasks: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RmFile {
    format_version: u32,
    model: RewardModel,
}

impl RewardModel {
    pub fn zeros(d: usize) -> Self {
        RewardModel {
            d,
            weights: vec![0.0; d],
            bias: 0.0,
        }
    }

    /// Unclamped linear prediction; the training objective uses this.
    pub fn raw(&self, x: &FeatureVector) -> f64 {
        self.bias
            + x.indices
                .iter()
                .zip(&x.values)
                .map(|(&i, &v)| v * self.weights[i as usize])
                .sum::<f64>()
    }

    pub fn predict(&self, through_t: PrefixView<'_>) -> f64 {
        self.raw(&featurize_outcome(through_t, self.d)).clamp(0.0, 1.0)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let file = RmFile {
            format_version: FORMAT_VERSION,
            model: self.clone(),
        };
        let mut bytes = serde_json::to_vec(&file)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
        Ok(crate::env::store::sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let file: RmFile = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::format(origin.clone(), e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported reward model format {}", file.format_version),
            ));
        }
        let m = file.model;
        if m.weights.len() != m.d || !m.bias.is_finite() || m.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::format(origin, "weights do not match the declared dimension"));
        }
        Ok(m)
    }
}

impl<E: Environment> StepScorer<E> for RewardModel {
    fn score(&self, _env: &E, through_t: PrefixView<'_>) -> Result<StepRewardEstimate> {
        if through_t.steps.is_empty() {
            return Err(Error::Contract("a scored history must contain the scored action".into()));
        }
        Ok(StepRewardEstimate {
            value: self.predict(through_t),
            n_samples: 0,
            std_error: 0.0,
            method: ScoreMethod::RewardModel,
        })
    }
}

pub fn mse(model: &RewardModel, data: &[RmExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().map(|e| (model.raw(&e.features) - e.label).powi(2)).sum::<f64>() / data.len() as f64
}

/// Gradient of [`mse`] as `(weights, bias)`.
pub fn mse_gradient(model: &RewardModel, data: &[&RmExample]) -> (Vec<f64>, f64) {
    let mut gw = vec![0.0; model.d];
    let mut gb = 0.0;
    let n = data.len().max(1) as f64;
    for e in data {
        let r = 2.0 * (model.raw(&e.features) - e.label) / n;
        gb += r;
        for (&i, &v) in e.features.indices.iter().zip(&e.features.values) {
            gw[i as usize] += r * v;
        }
    }
    (gw, gb)
}

fn variance(labels: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = labels.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = labels.clone().sum::<f64>() / n as f64;
    labels.map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64
}

/// Tasks held out for evaluation: the lowest seeded hashes of task ids.
pub fn heldout_tasks(task_ids: &BTreeSet<&str>, fraction: f64, seed: u64) -> Vec<String> {
    let mut keyed: Vec<(u64, &str)> = task_ids
        .iter()
        .map(|t| (crate::rng::derive_seed(seed, &[fnv1a(t.as_bytes())]), *t))
        .collect();
    keyed.sort();
    let k = ((task_ids.len() as f64 * fraction).round() as usize).clamp(1, task_ids.len() - 1);
    let mut out: Vec<String> = keyed[..k].iter().map(|(_, t)| t.to_string()).collect();
    out.sort();
    out
}

/// Fits the regressor by mini-batch gradient descent on squared error.
///
/// Examples are split 90/10 by task id. An epoch that raises the training
/// error is undone and the learning rate halved.
pub fn train_reward_model(steps: &[ScoredStep], config: &RmConfig, seed: u64) -> Result<RmOutcome> {
    if steps.is_empty() {
        return Err(Error::InsufficientData("the scored-step dump is empty".into()));
    }
    if config.d == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::config("reward_model", "d, batch_size and learning_rate must be positive"));
    }
    if !(config.heldout_fraction > 0.0 && config.heldout_fraction < 1.0) {
        return Err(Error::config("reward_model.heldout_fraction", "must lie in (0, 1)"));
    }
    if let Some(s) = steps.iter().find(|s| !(0.0..=1.0).contains(&s.value)) {
        return Err(Error::Contract(format!(
            "label {} for task {} step {} is outside [0, 1]",
            s.value, s.task_id, s.step
        )));
    }
    let tasks: BTreeSet<&str> = steps.iter().map(|s| s.task_id.as_str()).collect();
    if tasks.len() < MIN_TASKS {
        return Err(Error::InsufficientData(format!(
            "{} distinct tasks; a held-out split needs at least {MIN_TASKS}",
            tasks.len()
        )));
    }
    let held = heldout_tasks(&tasks, config.heldout_fraction, seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in steps {
        let ex = RmExample {
            features: featurize_outcome(s.prefix.view(), config.d),
            label: s.value,
        };
        if held.binary_search(&s.task_id).is_ok() {
            test.push(ex);
        } else {
            train.push(ex);
        }
    }
    let mut model = RewardModel::zeros(config.d);
    let initial_train_mse = mse(&model, &train);
    let mut prev = initial_train_mse;
    let mut lr = config.learning_rate;
    let mut metrics = vec![RmEpoch {
        epoch: 0,
        train_mse: prev,
    }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let snapshot = model.clone();
        order.shuffle(&mut named_stream(seed, "rm-shuffle", epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&RmExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (gw, gb) = mse_gradient(&model, &batch);
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            model.bias -= lr * gb;
        }
        let loss = mse(&model, &train);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: format!("reward model error at learning rate {lr}"),
            });
        }
        if loss > prev {
            model = snapshot;
            lr /= 2.0;
            continue;
        }
        prev = loss;
        metrics.push(RmEpoch {
            epoch,
            train_mse: loss,
        });
    }
    Ok(RmOutcome {
        heldout_mse: mse(&model, &test),
        heldout_label_variance: variance(test.iter().map(|e| e.label)),
        train_mse: prev,
        initial_train_mse,
        heldout_tasks: held,
        model,
        metrics,
    })
}

/// Scorer-labeled steps for reward-model training.
///
/// For each expert, every step of the expert trajectory and every step of
/// one temperature-1 rollout of `explorer` from the empty prefix is scored,
/// so labels cover both good and poor actions.
pub fn collect_step_labels<E: Environment, P: Policy + ?Sized>(
    env: &E,
    explorer: &P,
    scorer: &dyn StepScorer<E>,
    experts: &[Trajectory],
    seed: u64,
) -> Result<Vec<ScoredStep>> {
    let per: Vec<Vec<ScoredStep>> = experts
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = named_stream(seed, "rm-explore", i as u64);
            let start = PrefixView {
                instruction: &e.instruction,
                steps: &[],
            };
            let sampled = env::rollout(env, explorer, start, 1.0, &mut rng)?;
            let mut out = Vec::new();
            for t in [e, &sampled] {
                for (k, est) in score_trajectory_steps(scorer, env, t)?.iter().enumerate() {
                    out.push(ScoredStep::new(t.prefix(k + 2), est));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Action, HistoryPrefix, Step};
    use crate::toy::{random_toy_task, ToyAction, ToyEnv};

    fn toy_steps(n_tasks: usize, label: impl Fn(usize, usize) -> f64) -> Vec<ScoredStep> {
        let env = ToyEnv;
        let mut out = Vec::new();
        for i in 0..n_tasks {
            let task = random_toy_task(&format!("toy-{i:04}"), 3, i as u64);
            let mut s = env::reset(&env, &task).unwrap();
            let mut h = HistoryPrefix::new(task.clone());
            for c in [i % 4, (i / 4) % 4] {
                let a = Action::Toy(ToyAction { choice: c });
                let (n, obs, _) = env::step(&env, &s, &a).unwrap();
                h.steps.push(Step::new(a, obs));
                s = n;
                let est = StepRewardEstimate {
                    value: label(i, c),
                    n_samples: 1,
                    std_error: 0.0,
                    method: ScoreMethod::Mc,
                };
                out.push(ScoredStep::new(h.view(), &est));
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let steps = toy_steps(12, |i, c| ((i * 7 + c * 3) % 10) as f64 / 10.0);
        let d = 32;
        let data: Vec<RmExample> = steps
            .iter()
            .map(|s| RmExample {
                features: featurize_outcome(s.prefix.view(), d),
                label: s.value,
            })
            .collect();
        let mut rng = named_stream(5, "rm-fd", 0);
        let mut model = RewardModel::zeros(d);
        for w in &mut model.weights {
            *w = rand::Rng::gen_range(&mut rng, -0.3..0.3);
        }
        model.bias = 0.1;
        let refs: Vec<&RmExample> = data.iter().collect();
        let (gw, gb) = mse_gradient(&model, &refs);
        let h = 1e-5;
        for i in 0..d {
            let mut p = model.clone();
            p.weights[i] += h;
            let mut m = model.clone();
            m.weights[i] -= h;
            let fd = (mse(&p, &data) - mse(&m, &data)) / (2.0 * h);
            assert!((fd - gw[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "weight {i}: {fd} vs {}", gw[i]);
        }
        let mut p = model.clone();
        p.bias += h;
        let mut m = model.clone();
        m.bias -= h;
        let fd = (mse(&p, &data) - mse(&m, &data)) / (2.0 * h);
        assert!((fd - gb).abs() <= 1e-4 * fd.abs().max(1e-3));
    }

    #[test]
    fn constant_labels_are_learned() {
        let steps = toy_steps(20, |_, _| 0.7);
        let out = train_reward_model(&steps, &RmConfig::default(), 1).unwrap();
        assert!(out.heldout_mse < 1e-4, "held-out mse {}", out.heldout_mse);
        assert!(out.train_mse < out.initial_train_mse);
        let p = out.model.predict(steps[0].prefix.view());
        assert!((p - 0.7).abs() < 1e-2);
    }

    #[test]
    fn too_few_tasks_are_refused() {
        let steps = toy_steps(9, |_, _| 0.5);
        let err = train_reward_model(&steps, &RmConfig::default(), 1).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn predictions_are_clamped() {
        let steps = toy_steps(1, |_, _| 0.5);
        let mut model = RewardModel::zeros(16);
        model.bias = 5.0;
        assert_eq!(model.predict(steps[0].prefix.view()), 1.0);
        model.bias = -5.0;
        let est = StepScorer::<ToyEnv>::score(&model, &ToyEnv, steps[0].prefix.view()).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.method, ScoreMethod::RewardModel);
    }

    #[test]
    fn save_load_round_trip() {
        let steps = toy_steps(12, |i, _| (i % 3) as f64 / 2.0);
        let out = train_reward_model(&steps, &RmConfig { epochs: 5, ..RmConfig::default() }, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rm.json");
        out.model.save(&path).unwrap();
        assert_eq!(RewardModel::load(&path).unwrap(), out.model);
    }

    #[test]
    fn split_is_deterministic_and_by_task() {
        let steps = toy_steps(30, |i, _| (i % 5) as f64 / 4.0);
        let a = train_reward_model(&steps, &RmConfig { epochs: 3, ..RmConfig::default() }, 4).unwrap();
        let b = train_reward_model(&steps, &RmConfig { epochs: 3, ..RmConfig::default() }, 4).unwrap();
        assert_eq!(a.heldout_tasks, b.heldout_tasks);
        assert_eq!(a.heldout_tasks.len(), 3);
        assert_eq!(a.model, b.model);
    }
}
