//! Contrastive data from exploring along expert trajectories.
//!
//! For every expert and every step `t`, the agent greedily continues from
//! the expert's first `t - 1` steps. Where its action differs from the
//! expert's, both actions are scored and a step pair is kept when the
//! expert's step reward wins by more than `tau` and the agent's rollout
//! ends with a lower outcome reward.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::store::{read_jsonl, read_trajectories, write_jsonl, write_trajectories};
use crate::env::{self, Environment, HistoryPrefix, Instruction, Policy, PrefixView, Trajectory, TrajectorySuffix};
use crate::error::{Error, Result};
use crate::scorer::{ScoredStep, StepRewardEstimate, StepScorer};

/// `e_{t-1}` with an expert-anchored win suffix and the agent's lose suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveStepPair {
    pub prefix: HistoryPrefix,
    pub win_suffix: TrajectorySuffix,
    pub lose_suffix: TrajectorySuffix,
    pub win_step_reward: StepRewardEstimate,
    pub lose_step_reward: StepRewardEstimate,
}

impl ContrastiveStepPair {
    /// 1-based index of the contrasted step.
    pub fn t(&self) -> usize {
        self.prefix.steps.len() + 1
    }

    /// History through the win-side action.
    pub fn win_through_t(&self) -> HistoryPrefix {
        let mut h = self.prefix.clone();
        h.steps.push(self.win_suffix.steps[0].clone());
        h
    }

    pub fn lose_through_t(&self) -> HistoryPrefix {
        let mut h = self.prefix.clone();
        h.steps.push(self.lose_suffix.steps[0].clone());
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTrajPair {
    pub instruction: Instruction,
    pub win_traj: Trajectory,
    pub lose_traj: Trajectory,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub n_experts: usize,
    /// Steps where the agent's action differed from the expert's.
    pub n_divergent: usize,
    pub n_step_pairs: usize,
    pub n_traj_pairs: usize,
}

/// Output of one pair-building pass.
#[derive(Debug, Clone, Default)]
pub struct PairBuild {
    pub step_pairs: Vec<ContrastiveStepPair>,
    pub traj_pairs: Vec<ContrastiveTrajPair>,
    /// Every action scored during the pass, in task and step order.
    pub scored: Vec<ScoredStep>,
    /// The agent's rollouts from the empty prefix, one per expert.
    pub agent_rollouts: Vec<Trajectory>,
    pub stats: PairStats,
}

/// Greedy agent continuation after the expert's first `t - 1` steps.
pub fn explore_from_expert<E: Environment, P: Policy + ?Sized>(
    env: &E,
    agent: &P,
    expert: &Trajectory,
    t: usize,
) -> Result<Trajectory> {
    if t == 0 || t > expert.len() {
        return Err(Error::Contract(format!(
            "exploration step {t} outside 1..={}",
            expert.len()
        )));
    }
    // Greedy rollouts never draw from the stream.
    let mut rng = crate::rng::stream(0, &[]);
    env::rollout(env, agent, expert.prefix(t), 0.0, &mut rng)
}

struct ExpertPairs {
    steps: Vec<ContrastiveStepPair>,
    traj: Option<ContrastiveTrajPair>,
    scored: Vec<ScoredStep>,
    rollout: Trajectory,
    divergent: usize,
}

fn pairs_for_expert<E: Environment, P: Policy + ?Sized>(
    env: &E,
    agent: &P,
    scorer: &dyn StepScorer<E>,
    expert: &Trajectory,
    tau: f64,
) -> Result<ExpertPairs> {
    let mut out = ExpertPairs {
        steps: Vec::new(),
        traj: None,
        scored: Vec::new(),
        rollout: explore_from_expert(env, agent, expert, 1)?,
        divergent: 0,
    };
    if out.rollout.outcome_reward < expert.outcome_reward {
        out.traj = Some(ContrastiveTrajPair {
            instruction: expert.instruction.clone(),
            win_traj: expert.clone(),
            lose_traj: out.rollout.clone(),
        });
    }
    for t in 1..=expert.len() {
        let explored = if t == 1 {
            out.rollout.clone()
        } else {
            explore_from_expert(env, agent, expert, t)?
        };
        if explored.steps[t - 1].action == expert.steps[t - 1].action {
            continue;
        }
        out.divergent += 1;
        let win_view = PrefixView {
            instruction: &expert.instruction,
            steps: &expert.steps[..t],
        };
        let lose_view = PrefixView {
            instruction: &explored.instruction,
            steps: &explored.steps[..t],
        };
        let win = scorer.score(env, win_view)?;
        let lose = scorer.score(env, lose_view)?;
        out.scored.push(ScoredStep::new(win_view, &win));
        out.scored.push(ScoredStep::new(lose_view, &lose));
        if win.value - lose.value > tau && explored.outcome_reward < expert.outcome_reward {
            out.steps.push(ContrastiveStepPair {
                prefix: expert.prefix(t).to_owned(),
                win_suffix: expert.suffix(t),
                lose_suffix: explored.suffix(t),
                win_step_reward: win,
                lose_step_reward: lose,
            });
        }
    }
    Ok(out)
}

/// Builds the step-pair set `D_s` and trajectory-pair set `D_t`.
///
/// Experts are processed in parallel and merged in input order.
pub fn build_pairs<E: Environment, P: Policy + ?Sized>(
    env: &E,
    agent: &P,
    scorer: &dyn StepScorer<E>,
    experts: &[Trajectory],
    tau: f64,
) -> Result<PairBuild> {
    if !(tau >= 0.0) {
        return Err(Error::config("pairs.tau", "must be non-negative"));
    }
    let per: Vec<ExpertPairs> = experts
        .par_iter()
        .map(|e| pairs_for_expert(env, agent, scorer, e, tau))
        .collect::<Result<_>>()?;
    let mut build = PairBuild {
        stats: PairStats {
            n_experts: experts.len(),
            ..PairStats::default()
        },
        ..PairBuild::default()
    };
    for p in per {
        build.stats.n_divergent += p.divergent;
        build.step_pairs.extend(p.steps);
        build.traj_pairs.extend(p.traj);
        build.scored.extend(p.scored);
        build.agent_rollouts.push(p.rollout);
    }
    build.stats.n_step_pairs = build.step_pairs.len();
    build.stats.n_traj_pairs = build.traj_pairs.len();
    Ok(build)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StepPairRecord {
    task_id: String,
    /// Content hash of the trajectory whose first `t - 1` steps form the prefix.
    prefix_source: String,
    t: usize,
    win_suffix: TrajectorySuffix,
    lose_suffix: TrajectorySuffix,
    win_step_reward: StepRewardEstimate,
    lose_step_reward: StepRewardEstimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrajPairRecord {
    task_id: String,
    win: String,
    lose: String,
}

/// File names of a persisted pair set.
pub const STEP_PAIRS_FILE: &str = "step_pairs.jsonl";
pub const TRAJ_PAIRS_FILE: &str = "traj_pairs.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";

/// Writes `D_s`, `D_t` and the trajectories they reference.
///
/// Step pairs carry the expert content hash plus inlined suffixes; their
/// prefixes are recovered from the referenced expert.
pub fn save_pairs(
    dir: &Path,
    experts: &[Trajectory],
    step_pairs: &[ContrastiveStepPair],
    traj_pairs: &[ContrastiveTrajPair],
) -> Result<()> {
    let mut store: BTreeMap<String, Trajectory> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut remember = |t: &Trajectory, store: &mut BTreeMap<String, Trajectory>| {
        let h = t.content_hash();
        if !store.contains_key(&h) {
            order.push(h.clone());
            store.insert(h.clone(), t.clone());
        }
        h
    };
    let expert_by_task: HashMap<&str, &Trajectory> =
        experts.iter().map(|e| (e.task_id(), e)).collect();
    let mut step_records = Vec::with_capacity(step_pairs.len());
    for p in step_pairs {
        let task_id = p.prefix.instruction.task_id.as_str();
        let expert = expert_by_task.get(task_id).ok_or_else(|| {
            Error::Contract(format!("step pair for {task_id} has no expert trajectory"))
        })?;
        if expert.steps[..p.prefix.steps.len()] != p.prefix.steps[..] {
            return Err(Error::Contract(format!(
                "step pair prefix for {task_id} is not a prefix of its expert"
            )));
        }
        step_records.push(StepPairRecord {
            task_id: task_id.to_string(),
            prefix_source: remember(expert, &mut store),
            t: p.t(),
            win_suffix: p.win_suffix.clone(),
            lose_suffix: p.lose_suffix.clone(),
            win_step_reward: p.win_step_reward,
            lose_step_reward: p.lose_step_reward,
        });
    }
    let mut traj_records = Vec::with_capacity(traj_pairs.len());
    for p in traj_pairs {
        traj_records.push(TrajPairRecord {
            task_id: p.instruction.task_id.clone(),
            win: remember(&p.win_traj, &mut store),
            lose: remember(&p.lose_traj, &mut store),
        });
    }
    let trajectories: Vec<Trajectory> = order.iter().map(|h| store[h].clone()).collect();
    write_trajectories(&dir.join(TRAJECTORIES_FILE), &trajectories)?;
    write_jsonl(&dir.join(STEP_PAIRS_FILE), &step_records)?;
    write_jsonl(&dir.join(TRAJ_PAIRS_FILE), &traj_records)?;
    Ok(())
}

pub fn load_pairs(dir: &Path) -> Result<(Vec<ContrastiveStepPair>, Vec<ContrastiveTrajPair>)> {
    let trajectories = read_trajectories(&dir.join(TRAJECTORIES_FILE))?;
    let by_hash: HashMap<String, Trajectory> = trajectories
        .into_iter()
        .map(|t| (t.content_hash(), t))
        .collect();
    let origin = |name: &str| dir.join(name).display().to_string();
    let lookup = |h: &str, file: &str| {
        by_hash
            .get(h)
            .ok_or_else(|| Error::format(origin(file), format!("unknown trajectory hash {h}")))
    };
    let mut step_pairs = Vec::new();
    for r in read_jsonl::<StepPairRecord>(&dir.join(STEP_PAIRS_FILE))? {
        let source = lookup(&r.prefix_source, STEP_PAIRS_FILE)?;
        if r.t == 0 || r.t > source.len() || r.win_suffix.steps.is_empty() || r.lose_suffix.steps.is_empty() {
            return Err(Error::format(
                origin(STEP_PAIRS_FILE),
                format!("task {}: malformed step pair at t={}", r.task_id, r.t),
            ));
        }
        step_pairs.push(ContrastiveStepPair {
            prefix: source.prefix(r.t).to_owned(),
            win_suffix: r.win_suffix,
            lose_suffix: r.lose_suffix,
            win_step_reward: r.win_step_reward,
            lose_step_reward: r.lose_step_reward,
        });
    }
    let mut traj_pairs = Vec::new();
    for r in read_jsonl::<TrajPairRecord>(&dir.join(TRAJ_PAIRS_FILE))? {
        let win = lookup(&r.win, TRAJ_PAIRS_FILE)?.clone();
        let lose = lookup(&r.lose, TRAJ_PAIRS_FILE)?.clone();
        traj_pairs.push(ContrastiveTrajPair {
            instruction: win.instruction.clone(),
            win_traj: win,
            lose_traj: lose,
        });
    }
    Ok((step_pairs, traj_pairs))
}
