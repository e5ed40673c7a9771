//! A tiny fully enumerable environment: a depth-3 decision tree with four
//! choices per node and a per-task table of leaf rewards.
//!
//! Used to validate the step-reward estimators against exact expectations.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::store::{read_instructions, write_instructions};
use crate::env::{
    self, Action, EnvId, Environment, Goal, Instruction, LegalAction, Step, Termination,
    Trajectory, Transition,
};
use crate::error::{Error, Result};
use crate::rng::named_stream;

pub const DEPTH: usize = 3;
pub const BRANCHING: usize = 4;
pub const N_LEAVES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGoal {
    /// Reward of each leaf, indexed by the choice path read as base-4 digits.
    pub leaf_rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyAction {
    pub choice: usize,
}

impl ToyAction {
    pub fn render(&self) -> String {
        format!("choose[{}]", self.choice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyState {
    pub path: Vec<usize>,
    leaf_rewards: std::sync::Arc<Vec<f64>>,
}

impl ToyState {
    pub fn leaf_index(&self) -> Option<usize> {
        (self.path.len() == DEPTH).then(|| self.path.iter().fold(0, |acc, &c| acc * BRANCHING + c))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToyEnv;

fn toy_goal(instruction: &Instruction) -> Result<&ToyGoal> {
    match &instruction.goal {
        Goal::Toy(g) if g.leaf_rewards.len() == N_LEAVES => Ok(g),
        Goal::Toy(_) => Err(Error::config(
            "instruction.goal.leaf_rewards",
            format!("expected {N_LEAVES} leaf rewards"),
        )),
        _ => Err(Error::config(
            "instruction.goal",
            format!("task {} has no toy goal", instruction.task_id),
        )),
    }
}

impl Environment for ToyEnv {
    type State = ToyState;

    fn id(&self) -> EnvId {
        EnvId::Toy
    }

    fn max_turns(&self) -> usize {
        DEPTH
    }

    fn num_slots(&self) -> usize {
        BRANCHING
    }

    fn initial_state(&self, instruction: &Instruction) -> Result<ToyState> {
        let goal = toy_goal(instruction)?;
        if goal.leaf_rewards.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config(
                "instruction.goal.leaf_rewards",
                "rewards must lie in [0, 1]",
            ));
        }
        Ok(ToyState {
            path: Vec::new(),
            leaf_rewards: std::sync::Arc::new(goal.leaf_rewards.clone()),
        })
    }

    fn legal_actions(&self, state: &ToyState) -> Vec<LegalAction> {
        if state.path.len() >= DEPTH {
            return Vec::new();
        }
        (0..BRANCHING)
            .map(|c| LegalAction {
                slot: c,
                action: Action::Toy(ToyAction { choice: c }),
            })
            .collect()
    }

    fn transition(&self, state: &ToyState, action: &Action) -> Option<Transition<ToyState>> {
        let Action::Toy(a) = action else {
            return None;
        };
        if a.choice >= BRANCHING || state.path.len() >= DEPTH {
            return None;
        }
        let mut next = state.clone();
        next.path.push(a.choice);
        let label: Vec<String> = next.path.iter().map(|c| c.to_string()).collect();
        Some(Transition {
            observation: format!("you are at node {}", label.join("-")),
            done: next.path.len() == DEPTH,
            state: next,
        })
    }

    fn outcome_reward(&self, state: &ToyState) -> f64 {
        state.leaf_index().map_or(0.0, |i| state.leaf_rewards[i])
    }
}

/// Task whose leaf rewards are drawn from `U{0, 0.05, ..., 1}`.
pub fn random_toy_task(task_id: &str, seed: u64, index: u64) -> Instruction {
    let mut rng = named_stream(seed, "toy-task", index);
    let leaf_rewards = (0..N_LEAVES)
        .map(|_| f64::from(rng.gen_range(0..=20u32)) / 20.0)
        .collect();
    Instruction {
        env_id: EnvId::Toy,
        task_id: task_id.to_string(),
        text: format!("find the most rewarding leaf in tree {task_id}"),
        goal: Goal::Toy(ToyGoal { leaf_rewards }),
    }
}

/// Greedy path to the best leaf, lowest path on ties.
pub fn toy_expert(instruction: &Instruction) -> Result<Trajectory> {
    let goal = toy_goal(instruction)?;
    let mut best = 0;
    for (i, r) in goal.leaf_rewards.iter().enumerate() {
        if *r > goal.leaf_rewards[best] {
            best = i;
        }
    }
    let mut digits = [0usize; DEPTH];
    let mut rest = best;
    for d in (0..DEPTH).rev() {
        digits[d] = rest % BRANCHING;
        rest /= BRANCHING;
    }
    let env = ToyEnv;
    let mut state = env::reset(&env, instruction)?;
    let mut steps = Vec::with_capacity(DEPTH);
    for c in digits {
        let action = Action::Toy(ToyAction { choice: c });
        let (next, obs, _) = env::step(&env, &state, &action)?;
        steps.push(Step::new(action, obs));
        state = next;
    }
    Ok(Trajectory {
        instruction: instruction.clone(),
        steps,
        outcome_reward: env::score_outcome(&env, &state)?,
        terminated: Termination::Completed,
    })
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: Vec<Instruction>,
    pub test: Vec<Instruction>,
}

impl ToyDataset {
    pub fn generate(n_train: usize, n_test: usize, seed: u64) -> Self {
        let make = |i: usize| random_toy_task(&format!("toy-{i:04}"), seed, i as u64);
        ToyDataset {
            train: (0..n_train).map(make).collect(),
            test: (n_train..n_train + n_test).map(make).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_instructions(&dir.join("train.jsonl"), &self.train)?;
        write_instructions(&dir.join("test.jsonl"), &self.test)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(ToyDataset {
            train: read_instructions(&dir.join("train.jsonl"))?,
            test: read_instructions(&dir.join("test.jsonl"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_reaches_best_leaf() {
        let task = random_toy_task("toy-0000", 3, 0);
        let expert = toy_expert(&task).unwrap();
        let Goal::Toy(g) = &task.goal else { unreachable!() };
        let max = g.leaf_rewards.iter().cloned().fold(0.0, f64::max);
        assert_eq!(expert.len(), DEPTH);
        assert_eq!(expert.outcome_reward, max);
    }

    #[test]
    fn episodes_last_exactly_three_steps() {
        let task = random_toy_task("toy-0001", 3, 1);
        let env = ToyEnv;
        let mut s = env::reset(&env, &task).unwrap();
        for k in 0..DEPTH {
            assert!(!s.is_terminal());
            let (n, _, done) = env::step(&env, &s, &Action::Toy(ToyAction { choice: k })).unwrap();
            s = n;
            assert_eq!(done, k + 1 == DEPTH);
        }
        assert_eq!(s.terminal, Some(Termination::Completed));
    }

    #[test]
    fn out_of_range_choice_is_absorbed() {
        let task = random_toy_task("toy-0002", 3, 2);
        let env = ToyEnv;
        let s = env::reset(&env, &task).unwrap();
        let (n, obs, _) = env::step(&env, &s, &Action::Toy(ToyAction { choice: 9 })).unwrap();
        assert_eq!(obs.text, env::NOTHING_HAPPENS);
        assert!(n.inner.path.is_empty());
        assert_eq!(n.step_counter, 1);
    }
}
