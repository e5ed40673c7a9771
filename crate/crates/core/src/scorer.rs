//! Step-level rewards: the expected outcome reward after taking an action,
//! estimated by rolling out a frozen scorer policy.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvState, Environment, HistoryPrefix, Policy, PrefixView, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{rollout_stream, stream};

pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Mc,
    Exact,
    /// The action ended the episode; the value is its outcome reward.
    Terminal,
    RewardModel,
    /// Seeded uniform noise, used as a null baseline.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRewardEstimate {
    pub value: f64,
    pub n_samples: usize,
    pub std_error: f64,
    pub method: ScoreMethod,
}

impl StepRewardEstimate {
    pub fn terminal(value: f64) -> Self {
        StepRewardEstimate {
            value,
            n_samples: 1,
            std_error: 0.0,
            method: ScoreMethod::Terminal,
        }
    }
}

/// Anything that can grade the last action of a history.
pub trait StepScorer<E: Environment>: Sync {
    /// Scores the final action of `through_t`, which must hold at least one step.
    fn score(&self, env: &E, through_t: PrefixView<'_>) -> Result<StepRewardEstimate>;
}

/// One scored action, as written to the scored-step dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredStep {
    pub prefix_hash: String,
    pub task_id: String,
    /// 1-based index of the scored action.
    pub step: usize,
    pub action: String,
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub method: ScoreMethod,
    /// History through the scored action.
    pub prefix: HistoryPrefix,
}

impl ScoredStep {
    pub fn new(through_t: PrefixView<'_>, est: &StepRewardEstimate) -> Self {
        let last = through_t.steps.last().expect("scored prefixes are non-empty");
        ScoredStep {
            prefix_hash: format!("{:016x}", through_t.key()),
            task_id: through_t.instruction.task_id.clone(),
            step: through_t.steps.len(),
            action: last.action_text.clone(),
            value: est.value,
            std_error: est.std_error,
            n_samples: est.n_samples,
            method: est.method,
            prefix: through_t.to_owned(),
        }
    }
}

fn check_nonempty(through_t: PrefixView<'_>) -> Result<()> {
    if through_t.steps.is_empty() {
        return Err(Error::Contract("a scored history must contain the scored action".into()));
    }
    Ok(())
}

/// Monte-Carlo estimate from `n_samples` scorer rollouts.
///
/// Rollout `i` for step `t` of a task draws from the stream keyed by
/// `(root_seed, task_id, t, i)`, so estimates are independent of scheduling.
pub struct MonteCarloScorer<'p, P: Policy> {
    policy: &'p P,
    n_samples: usize,
    root_seed: u64,
    temperature: f64,
    cache: Mutex<HashMap<u64, StepRewardEstimate>>,
}

impl<'p, P: Policy> MonteCarloScorer<'p, P> {
    pub fn new(policy: &'p P, n_samples: usize, root_seed: u64) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::config("scorer.n_samples", "must be at least 1"));
        }
        Ok(MonteCarloScorer {
            policy,
            n_samples,
            root_seed,
            temperature: 1.0,
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Overrides the sampling temperature (1 by default).
    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn estimate<E: Environment>(
        &self,
        env: &E,
        through_t: PrefixView<'_>,
        state: &EnvState<E::State>,
    ) -> Result<StepRewardEstimate> {
        let t = through_t.steps.len();
        let rewards: Vec<f64> = (0..self.n_samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = rollout_stream(self.root_seed, &through_t.instruction.task_id, t, i);
                env::continue_rollout(
                    env,
                    self.policy,
                    through_t.instruction,
                    through_t.steps.to_vec(),
                    state.clone(),
                    self.temperature,
                    &mut rng,
                )
                .map(|traj| traj.outcome_reward)
            })
            .collect::<Result<_>>()?;
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std_error = if rewards.len() > 1 {
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Ok(StepRewardEstimate {
            value: mean,
            n_samples: self.n_samples,
            std_error,
            method: ScoreMethod::Mc,
        })
    }
}

impl<E: Environment, P: Policy> StepScorer<E> for MonteCarloScorer<'_, P> {
    fn score(&self, env: &E, through_t: PrefixView<'_>) -> Result<StepRewardEstimate> {
        check_nonempty(through_t)?;
        let key = crate::rng::derive_seed(through_t.key(), &[self.n_samples as u64, self.root_seed]);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*hit);
        }
        let state = env::replay(env, through_t)?;
        let est = if state.is_terminal() {
            StepRewardEstimate::terminal(env::score_outcome(env, &state)?)
        } else {
            self.estimate(env, through_t, &state)?
        };
        self.cache.lock().expect("cache lock").insert(key, est);
        Ok(est)
    }
}

/// Exact expectation by enumerating every continuation, weighted by the
/// scorer's temperature-1 action probabilities.
pub struct ExactScorer<'p, P: Policy> {
    policy: &'p P,
    node_budget: usize,
}

impl<'p, P: Policy> ExactScorer<'p, P> {
    pub fn new(policy: &'p P) -> Self {
        ExactScorer {
            policy,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }

    pub fn with_budget(mut self, node_budget: usize) -> Self {
        self.node_budget = node_budget;
        self
    }

    fn expectation<E: Environment>(
        &self,
        env: &E,
        instruction: &crate::env::Instruction,
        history: &mut Vec<crate::env::Step>,
        state: &EnvState<E::State>,
        nodes: &mut usize,
    ) -> Result<f64> {
        *nodes += 1;
        if *nodes > self.node_budget {
            return Err(Error::BudgetExceeded {
                budget: self.node_budget,
            });
        }
        if state.is_terminal() {
            return env::score_outcome(env, state);
        }
        let legal = env.legal_actions(&state.inner);
        if legal.is_empty() {
            return Err(Error::Contract("no legal action in a non-terminal state".into()));
        }
        let logits = self.policy.logits(
            PrefixView {
                instruction,
                steps: history,
            },
            &legal,
        );
        let logp = crate::policy::log_softmax(&logits);
        let mut total = 0.0;
        for (la, lp) in legal.iter().zip(logp) {
            let p = lp.exp();
            if p == 0.0 {
                continue;
            }
            let (next, obs, _) = env::step(env, state, &la.action)?;
            history.push(crate::env::Step::new(la.action.clone(), obs));
            let v = self.expectation(env, instruction, history, &next, nodes);
            history.pop();
            total += p * v?;
        }
        Ok(total)
    }
}

impl<E: Environment, P: Policy> StepScorer<E> for ExactScorer<'_, P> {
    fn score(&self, env: &E, through_t: PrefixView<'_>) -> Result<StepRewardEstimate> {
        check_nonempty(through_t)?;
        let state = env::replay(env, through_t)?;
        if state.is_terminal() {
            return Ok(StepRewardEstimate::terminal(env::score_outcome(env, &state)?));
        }
        let mut history = through_t.steps.to_vec();
        let mut nodes = 0;
        let value = self.expectation(env, through_t.instruction, &mut history, &state, &mut nodes)?;
        Ok(StepRewardEstimate {
            value: value.clamp(0.0, 1.0),
            n_samples: nodes,
            std_error: 0.0,
            method: ScoreMethod::Exact,
        })
    }
}

/// Seeded uniform values that ignore the history's content.
pub struct RandomScorer {
    seed: u64,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        RandomScorer { seed }
    }
}

impl<E: Environment> StepScorer<E> for RandomScorer {
    fn score(&self, _env: &E, through_t: PrefixView<'_>) -> Result<StepRewardEstimate> {
        check_nonempty(through_t)?;
        let value = stream(self.seed, &[through_t.key()]).gen::<f64>();
        Ok(StepRewardEstimate {
            value,
            n_samples: 1,
            std_error: 0.0,
            method: ScoreMethod::Random,
        })
    }
}

/// One independent estimate per step of a trajectory.
pub fn score_trajectory_steps<E: Environment>(
    scorer: &dyn StepScorer<E>,
    env: &E,
    trajectory: &Trajectory,
) -> Result<Vec<StepRewardEstimate>> {
    (1..=trajectory.len())
        .map(|t| {
            scorer.score(
                env,
                PrefixView {
                    instruction: &trajectory.instruction,
                    steps: &trajectory.steps[..t],
                },
            )
        })
        .collect()
}
