//! Linear-softmax policy over hashed history features.
//!
//! The logit of a legal action is the dot product of the prefix features
//! with the weight column of the action's slot. Illegal slots are masked
//! out before the softmax.

pub mod checkpoint;
pub mod features;

use crate::env::{
    self, legal_index, Environment, Instruction, LegalAction, Policy, PrefixView, Step,
    TrajectorySuffix,
};
use crate::error::{Error, Result};

pub use features::{featurize, featurize_outcome, FeatureVector};

pub const DEFAULT_FEATURE_DIM: usize = 256;

/// Weight matrix of shape `d x n_actions`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    d: usize,
    n_actions: usize,
    weights: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    pub fn zeros(d: usize, n_actions: usize) -> Self {
        PolicyParams {
            d,
            n_actions,
            weights: vec![0.0; d * n_actions],
            version: 0,
        }
    }

    pub fn from_weights(d: usize, n_actions: usize, weights: Vec<f64>, version: u64) -> Result<Self> {
        if weights.len() != d * n_actions {
            return Err(Error::Contract(format!(
                "weight buffer has {} entries, shape {d}x{n_actions} needs {}",
                weights.len(),
                d * n_actions
            )));
        }
        Ok(PolicyParams {
            d,
            n_actions,
            weights,
            version,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Direct mutable access; does not touch the version counter.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.weights.len()]
    }

    /// `w <- w - lr * grad`, counted as one optimizer step.
    pub fn descend(&mut self, grad: &[f64], lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        self.version += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    /// L2 norm of each action column.
    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.n_actions)
            .map(|a| {
                (0..self.d)
                    .map(|i| self.weights[i * self.n_actions + a].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    pub fn slot_logits(&self, features: &FeatureVector, slots: &[usize]) -> Vec<f64> {
        slots
            .iter()
            .map(|&s| features.dot_column(&self.weights, self.n_actions, s))
            .collect()
    }
}

impl Policy for PolicyParams {
    fn logits(&self, prefix: PrefixView<'_>, legal: &[LegalAction]) -> Vec<f64> {
        let f = featurize(prefix, self.d);
        legal
            .iter()
            .map(|l| f.dot_column(&self.weights, self.n_actions, l.slot))
            .collect()
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// One teacher-forced choice: prefix features, legal slots, and the index
/// (into `legal`) of the action actually taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub features: FeatureVector,
    pub legal: Vec<usize>,
    pub chosen: usize,
}

impl Decision {
    pub fn logprob(&self, params: &PolicyParams) -> f64 {
        log_softmax(&params.slot_logits(&self.features, &self.legal))[self.chosen]
    }

    /// Whether the greedy choice (lowest index on ties) is the taken action.
    pub fn greedy_agrees(&self, params: &PolicyParams) -> bool {
        let logits = params.slot_logits(&self.features, &self.legal);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best == self.chosen
    }

    /// Adds `scale * grad log pi(chosen)` into `grad`.
    pub fn accumulate_grad(&self, params: &PolicyParams, scale: f64, grad: &mut [f64]) {
        let lp = log_softmax(&params.slot_logits(&self.features, &self.legal));
        let n = params.n_actions;
        for (b, (&slot, l)) in self.legal.iter().zip(&lp).enumerate() {
            let coef = scale * (f64::from(u8::from(b == self.chosen)) - l.exp());
            if coef == 0.0 {
                continue;
            }
            for (&i, &v) in self.features.indices.iter().zip(&self.features.values) {
                grad[i as usize * n + slot] += coef * v;
            }
        }
    }
}

pub fn sequence_logprob(params: &PolicyParams, decisions: &[Decision]) -> f64 {
    decisions.iter().map(|d| d.logprob(params)).sum()
}

pub fn accumulate_sequence_grad(params: &PolicyParams, decisions: &[Decision], scale: f64, grad: &mut [f64]) {
    for d in decisions {
        d.accumulate_grad(params, scale, grad);
    }
}

/// Replays `prior` and then teacher-forces `steps`, recording one decision
/// per step. Fails with a data-corruption error if a stored action is not
/// legal where it was taken or an observation does not replay.
pub fn compile_steps<E: Environment>(
    env: &E,
    d: usize,
    instruction: &Instruction,
    prior: &[Step],
    steps: &[Step],
) -> Result<Vec<Decision>> {
    let mut state = env::replay(
        env,
        PrefixView {
            instruction,
            steps: prior,
        },
    )?;
    let mut history: Vec<Step> = prior.to_vec();
    let mut out = Vec::with_capacity(steps.len());
    for step in steps {
        let t = history.len() + 1;
        if state.is_terminal() {
            return Err(Error::DataCorruption(format!(
                "task {}: step {t} follows the end of the episode",
                instruction.task_id
            )));
        }
        let legal = env.legal_actions(&state.inner);
        let chosen = legal_index(&legal, &step.action).ok_or_else(|| {
            Error::DataCorruption(format!(
                "task {}: stored action {} is illegal at step {t}",
                instruction.task_id, step.action_text
            ))
        })?;
        let features = featurize(
            PrefixView {
                instruction,
                steps: &history,
            },
            d,
        );
        out.push(Decision {
            features,
            legal: legal.iter().map(|l| l.slot).collect(),
            chosen,
        });
        let (next, obs, _) = env::step(env, &state, &step.action)?;
        if obs != step.observation {
            return Err(Error::DataCorruption(format!(
                "task {}: step {t} observation does not replay",
                instruction.task_id
            )));
        }
        history.push(step.clone());
        state = next;
    }
    Ok(out)
}

/// Log-probabilities of the legal actions after `prefix`, in `legal` order.
pub fn action_logprobs(params: &PolicyParams, prefix: PrefixView<'_>, legal: &[LegalAction]) -> Result<Vec<f64>> {
    if legal.is_empty() {
        return Err(Error::Contract("action_logprobs needs a non-empty legal set".into()));
    }
    Ok(log_softmax(&params.logits(prefix, legal)))
}

/// `log pi(suffix | prefix)` under teacher forcing of stored observations.
pub fn trajectory_logprob<E: Environment>(
    params: &PolicyParams,
    env: &E,
    prefix: PrefixView<'_>,
    suffix: &TrajectorySuffix,
) -> Result<f64> {
    let decisions = compile_steps(env, params.d(), prefix.instruction, prefix.steps, &suffix.steps)?;
    Ok(sequence_logprob(params, &decisions))
}

/// Gradient of [`trajectory_logprob`] with respect to the weights.
pub fn logprob_gradient<E: Environment>(
    params: &PolicyParams,
    env: &E,
    prefix: PrefixView<'_>,
    suffix: &TrajectorySuffix,
) -> Result<Vec<f64>> {
    let decisions = compile_steps(env, params.d(), prefix.instruction, prefix.steps, &suffix.steps)?;
    let mut grad = params.zero_grad();
    accumulate_sequence_grad(params, &decisions, 1.0, &mut grad);
    Ok(grad)
}

#[cfg(test)]
mod tests;
