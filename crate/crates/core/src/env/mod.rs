//! POMDP contract shared by every environment, plus the episode runner.
//!
//! Environments implement [`Environment`] with a value-like state; the free
//! functions here ([`reset`], [`step`], [`score_outcome`], [`replay`],
//! [`rollout`]) add step counting, the turn budget, and invalid-action
//! absorption on top of it, so every environment gets identical semantics.

mod policy;
pub mod store;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gridhouse::{HouseAction, HouseTask};
use crate::shopsim::{ShopAction, ShopGoal};
use crate::toy::{ToyAction, ToyGoal};

pub use policy::{sample_index, OraclePolicy, Policy, ScriptedPolicy, UniformPolicy};

/// Observation emitted for any action that is invalid in the current state.
pub const NOTHING_HAPPENS: &str = "Nothing happens";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    ShopSim,
    GridHouse,
    Toy,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::ShopSim => "shopsim",
            EnvId::GridHouse => "gridhouse",
            EnvId::Toy => "toy",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shopsim" => Ok(EnvId::ShopSim),
            "gridhouse" => Ok(EnvId::GridHouse),
            "toy" => Ok(EnvId::Toy),
            other => Err(Error::config(
                "env",
                format!("unknown environment `{other}` (expected shopsim, gridhouse or toy)"),
            )),
        }
    }
}

/// Environment-specific goal record carried by an [`Instruction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Goal {
    Shop(ShopGoal),
    House(HouseTask),
    Toy(ToyGoal),
}

/// A task: what the agent is asked to do, with its canonical rendering.
///
/// The first line of `text` is the goal sentence; any further lines describe
/// the initial scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub env_id: EnvId,
    pub task_id: String,
    pub text: String,
    pub goal: Goal,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "lowercase")]
pub enum Action {
    Shop(ShopAction),
    House(HouseAction),
    Toy(ToyAction),
}

impl Action {
    /// Canonical text rendering, unique within an environment.
    pub fn render(&self) -> String {
        match self {
            Action::Shop(a) => a.render(),
            Action::House(a) => a.render(),
            Action::Toy(a) => a.render(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
}

impl Observation {
    pub fn new(text: impl Into<String>) -> Self {
        Observation { text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub action: Action,
    pub action_text: String,
    pub observation: Observation,
}

impl Step {
    pub fn new(action: Action, observation: Observation) -> Self {
        Step {
            action_text: action.render(),
            action,
            observation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    MaxTurns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instruction: Instruction,
    pub steps: Vec<Step>,
    pub outcome_reward: f64,
    pub terminated: Termination,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn task_id(&self) -> &str {
        &self.instruction.task_id
    }

    /// The history `e_{t-1}`: instruction plus the first `t - 1` steps.
    pub fn prefix(&self, t: usize) -> PrefixView<'_> {
        PrefixView {
            instruction: &self.instruction,
            steps: &self.steps[..t - 1],
        }
    }

    /// Steps from `t` (1-based) to the end, with this trajectory's outcome.
    pub fn suffix(&self, t: usize) -> TrajectorySuffix {
        TrajectorySuffix {
            steps: self.steps[t - 1..].to_vec(),
            outcome_reward: self.outcome_reward,
        }
    }

    pub fn view(&self) -> PrefixView<'_> {
        PrefixView {
            instruction: &self.instruction,
            steps: &self.steps,
        }
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("trajectory serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Owned history prefix `e_{t-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPrefix {
    pub instruction: Instruction,
    pub steps: Vec<Step>,
}

impl HistoryPrefix {
    pub fn new(instruction: Instruction) -> Self {
        HistoryPrefix {
            instruction,
            steps: Vec::new(),
        }
    }

    pub fn view(&self) -> PrefixView<'_> {
        PrefixView {
            instruction: &self.instruction,
            steps: &self.steps,
        }
    }
}

/// Borrowed history: the instruction and the steps taken so far.
#[derive(Debug, Clone, Copy)]
pub struct PrefixView<'a> {
    pub instruction: &'a Instruction,
    pub steps: &'a [Step],
}

impl<'a> PrefixView<'a> {
    pub fn to_owned(&self) -> HistoryPrefix {
        HistoryPrefix {
            instruction: self.instruction.clone(),
            steps: self.steps.to_vec(),
        }
    }

    /// Stable 64-bit key over the task id and the action sequence.
    ///
    /// Observations are a deterministic function of the actions, so they
    /// are not part of the key.
    pub fn key(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.instruction.task_id.as_bytes());
        for step in self.steps {
            hasher.update([0u8]);
            hasher.update(step.action_text.as_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// `e_{t:n}`: the steps from `t` onward and the completed trajectory's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySuffix {
    pub steps: Vec<Step>,
    pub outcome_reward: f64,
}

/// An action the environment accepts in the current state, with the
/// policy slot it occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct LegalAction {
    pub slot: usize,
    pub action: Action,
}

/// Result of a valid transition.
#[derive(Debug, Clone)]
pub struct Transition<S> {
    pub state: S,
    pub observation: String,
    pub done: bool,
}

/// A deterministic POMDP.
///
/// Implementations only describe valid transitions; invalid actions, step
/// counting, and truncation are handled by [`step`].
pub trait Environment: Send + Sync {
    type State: Clone + Send + Sync + fmt::Debug;

    fn id(&self) -> EnvId;

    fn max_turns(&self) -> usize;

    /// Size of the policy's action-slot space.
    fn num_slots(&self) -> usize;

    fn initial_state(&self, instruction: &Instruction) -> Result<Self::State>;

    /// Valid actions in ascending slot order; slots are unique.
    fn legal_actions(&self, state: &Self::State) -> Vec<LegalAction>;

    /// `None` when `action` is invalid in `state`.
    fn transition(&self, state: &Self::State, action: &Action) -> Option<Transition<Self::State>>;

    /// Outcome reward of a finished episode, in `[0, 1]`.
    fn outcome_reward(&self, state: &Self::State) -> f64;
}

#[derive(Debug, Clone)]
pub struct EnvState<S> {
    pub inner: S,
    pub step_counter: usize,
    pub terminal: Option<Termination>,
}

impl<S> EnvState<S> {
    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }
}

pub fn reset<E: Environment>(env: &E, instruction: &Instruction) -> Result<EnvState<E::State>> {
    if instruction.env_id != env.id() {
        return Err(Error::config(
            "instruction.env_id",
            format!(
                "task {} belongs to {}, not {}",
                instruction.task_id,
                instruction.env_id,
                env.id()
            ),
        ));
    }
    Ok(EnvState {
        inner: env.initial_state(instruction)?,
        step_counter: 0,
        terminal: None,
    })
}

/// Applies one action. Invalid actions consume a turn and change nothing else.
pub fn step<E: Environment>(
    env: &E,
    state: &EnvState<E::State>,
    action: &Action,
) -> Result<(EnvState<E::State>, Observation, bool)> {
    if state.is_terminal() {
        return Err(Error::Contract("step called on a terminal state".into()));
    }
    let step_counter = state.step_counter + 1;
    let (inner, text, done) = match env.transition(&state.inner, action) {
        Some(tr) => (tr.state, tr.observation, tr.done),
        None => (state.inner.clone(), NOTHING_HAPPENS.to_string(), false),
    };
    let terminal = if done {
        Some(Termination::Completed)
    } else if step_counter >= env.max_turns() {
        Some(Termination::MaxTurns)
    } else {
        None
    };
    let next = EnvState {
        inner,
        step_counter,
        terminal,
    };
    let flag = next.is_terminal();
    Ok((next, Observation::new(text), flag))
}

pub fn score_outcome<E: Environment>(env: &E, state: &EnvState<E::State>) -> Result<f64> {
    if !state.is_terminal() {
        return Err(Error::Contract("outcome requested for a non-terminal state".into()));
    }
    Ok(env.outcome_reward(&state.inner))
}

/// Re-executes a stored history, checking every observation.
pub fn replay<E: Environment>(env: &E, prefix: PrefixView<'_>) -> Result<EnvState<E::State>> {
    let mut state = reset(env, prefix.instruction)?;
    for (i, s) in prefix.steps.iter().enumerate() {
        if state.is_terminal() {
            return Err(Error::DataCorruption(format!(
                "task {}: episode ended before stored step {}",
                prefix.instruction.task_id,
                i + 1
            )));
        }
        let (next, obs, _) = step(env, &state, &s.action)?;
        if obs != s.observation {
            return Err(Error::DataCorruption(format!(
                "task {}: step {} observation does not replay",
                prefix.instruction.task_id,
                i + 1
            )));
        }
        state = next;
    }
    Ok(state)
}

/// Replays `prefix`, then samples from `policy` until the episode ends.
///
/// Temperature 0 is greedy with ties going to the lowest slot.
pub fn rollout<E, P, R>(
    env: &E,
    policy: &P,
    prefix: PrefixView<'_>,
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory>
where
    E: Environment,
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    let state = replay(env, prefix)?;
    continue_rollout(
        env,
        policy,
        prefix.instruction,
        prefix.steps.to_vec(),
        state,
        temperature,
        rng,
    )
}

/// Continues an episode from an already replayed state.
pub fn continue_rollout<E, P, R>(
    env: &E,
    policy: &P,
    instruction: &Instruction,
    mut steps: Vec<Step>,
    mut state: EnvState<E::State>,
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory>
where
    E: Environment,
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    while !state.is_terminal() {
        let legal = env.legal_actions(&state.inner);
        if legal.is_empty() {
            return Err(Error::Contract(format!(
                "task {}: no legal action in a non-terminal state",
                instruction.task_id
            )));
        }
        let view = PrefixView {
            instruction,
            steps: &steps,
        };
        let logits = policy.logits(view, &legal);
        let chosen = sample_index(&logits, temperature, rng);
        let action = legal[chosen].action.clone();
        let (next, observation, _) = step(env, &state, &action)?;
        steps.push(Step::new(action, observation));
        state = next;
    }
    let outcome_reward = score_outcome(env, &state)?;
    Ok(Trajectory {
        instruction: instruction.clone(),
        steps,
        outcome_reward,
        terminated: state.terminal.expect("loop exits on terminal"),
    })
}

/// Position of `action` in the legal list, if present.
pub fn legal_index(legal: &[LegalAction], action: &Action) -> Option<usize> {
    legal.iter().position(|l| &l.action == action)
}
