//! Evaluation and analysis: greedy test reward, average step reward along
//! the agent's own trajectories, step-reward ordering accuracy against a
//! ground-truth grader, and sign tests over seeds.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::store::write_atomic;
use crate::env::{self, Environment, Instruction, Policy, PrefixView, Termination, Trajectory};
use crate::error::{Error, Result};
use crate::pairs::build_pairs;
use crate::scorer::{score_trajectory_steps, StepScorer};
use crate::shopsim::{heuristic_page_score, ShopSim};

/// One greedy evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_id: String,
    pub reward: f64,
    pub n_steps: usize,
    pub terminated: Termination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_reward: f64,
    pub records: Vec<EvalRecord>,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Greedy episode from the empty prefix.
pub fn greedy_rollout<E: Environment, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    instruction: &Instruction,
) -> Result<Trajectory> {
    // Temperature 0 never draws from the stream.
    let mut rng = crate::rng::stream(0, &[]);
    let view = PrefixView {
        instruction,
        steps: &[],
    };
    env::rollout(env, policy, view, 0.0, &mut rng)
}

/// Mean greedy outcome reward over `tasks`, with one record per task in
/// input order.
pub fn evaluate<E: Environment, P: Policy + ?Sized>(env: &E, policy: &P, tasks: &[Instruction]) -> Result<Evaluation> {
    let records: Vec<EvalRecord> = tasks
        .par_iter()
        .map(|i| {
            let t = greedy_rollout(env, policy, i)?;
            Ok(EvalRecord {
                task_id: i.task_id.clone(),
                reward: t.outcome_reward,
                n_steps: t.len(),
                terminated: t.terminated,
            })
        })
        .collect::<Result<_>>()?;
    let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
    Ok(Evaluation {
        mean_reward: mean(&rewards),
        records,
    })
}

/// Per-task mean step reward of the agent's greedy trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRewardRecord {
    pub task_id: String,
    pub n_steps: usize,
    pub mean_step_reward: f64,
}

/// Scores every step of each greedy test trajectory, averages within the
/// trajectory, then across tasks.
pub fn avg_reward_per_step<E: Environment, P: Policy + ?Sized>(
    env: &E,
    agent: &P,
    scorer: &dyn StepScorer<E>,
    tasks: &[Instruction],
) -> Result<(f64, Vec<StepRewardRecord>)> {
    let records: Vec<StepRewardRecord> = tasks
        .par_iter()
        .map(|i| {
            let t = greedy_rollout(env, agent, i)?;
            let values: Vec<f64> = score_trajectory_steps(scorer, env, &t)?
                .iter()
                .map(|e| e.value)
                .collect();
            Ok(StepRewardRecord {
                task_id: i.task_id.clone(),
                n_steps: t.len(),
                mean_step_reward: mean(&values),
            })
        })
        .collect::<Result<_>>()?;
    let means: Vec<f64> = records.iter().map(|r| r.mean_step_reward).collect();
    Ok((mean(&means), records))
}

/// Agreement between scorer-imposed and ground-truth action orders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub n_pairs: usize,
    /// Agreeing pairs, with ground-truth ties counted as one half.
    pub agreement: f64,
}

impl Accuracy {
    /// `None` when no pair was constructed.
    pub fn value(&self) -> Option<f64> {
        (self.n_pairs > 0).then(|| self.agreement / self.n_pairs as f64)
    }
}

/// Ground-truth grade of the state reached by the last action of a history.
pub type Truth<'a> = dyn Fn(PrefixView<'_>) -> Result<f64> + Sync + 'a;

/// Contrasts the expert's and the agent's actions at every divergent step
/// along the experts. Where the scorer separates the two by more than
/// `tau`, the order it imposes is checked against `truth`.
pub fn step_reward_accuracy<E: Environment, P: Policy + ?Sized>(
    env: &E,
    agent: &P,
    scorer: &dyn StepScorer<E>,
    experts: &[Trajectory],
    tau: f64,
    truth: &Truth<'_>,
) -> Result<Accuracy> {
    let build = build_pairs(env, agent, scorer, experts, tau)?;
    let mut acc = Accuracy {
        n_pairs: 0,
        agreement: 0.0,
    };
    // The scored dump alternates expert and agent actions per divergent step.
    for pair in build.scored.chunks_exact(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if (a.value - b.value).abs() <= tau {
            continue;
        }
        let (ta, tb) = (truth(a.prefix.view())?, truth(b.prefix.view())?);
        acc.n_pairs += 1;
        acc.agreement += if ta == tb {
            0.5
        } else if (ta > tb) == (a.value > b.value) {
            1.0
        } else {
            0.0
        };
    }
    Ok(acc)
}

/// ShopSim ground truth: the heuristic grade of the page the action led to.
pub fn shop_page_truth(env: &ShopSim) -> impl Fn(PrefixView<'_>) -> Result<f64> + Sync + '_ {
    move |view| {
        let s = env::replay(env, view)?;
        Ok(heuristic_page_score(&s.inner.goal, &s.inner.page, env.catalog()))
    }
}

/// Ground truth taken from another scorer, e.g. the exact oracle.
pub fn scorer_truth<'a, E: Environment>(
    env: &'a E,
    scorer: &'a dyn StepScorer<E>,
) -> impl Fn(PrefixView<'_>) -> Result<f64> + Sync + 'a {
    move |view| scorer.score(env, view).map(|e| e.value)
}

/// Paired per-seed comparison of two arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub mean_difference: f64,
    /// One-sided `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(treatment: &[f64], control: &[f64]) -> Result<SignTest> {
    if treatment.len() != control.len() || treatment.is_empty() {
        return Err(Error::Contract("sign test needs equally many paired values".into()));
    }
    let diffs: Vec<f64> = treatment.iter().zip(control).map(|(a, b)| a - b).collect();
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let losses = diffs.iter().filter(|d| **d < 0.0).count();
    let n = wins + losses;
    let mut p = 0.0;
    for k in wins..=n {
        p += binomial(n, k) * 0.5f64.powi(n as i32);
    }
    Ok(SignTest {
        wins,
        losses,
        ties: diffs.len() - n,
        mean_difference: mean(&diffs),
        p_value: if n == 0 { 1.0 } else { p.min(1.0) },
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Serializes rows as CSV with a header taken from the field names.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes `rows` atomically; an empty slice still gets `header`.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let bytes = if rows.is_empty() {
        format!("{}\n", header.join(",")).into_bytes()
    } else {
        csv_bytes(rows)?
    };
    write_atomic(path, &bytes)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub const EVAL_HEADER: &[&str] = &["task_id", "reward", "n_steps", "terminated"];
pub const STEP_REWARD_HEADER: &[&str] = &["task_id", "n_steps", "mean_step_reward"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{OraclePolicy, UniformPolicy};
    use crate::scorer::{ExactScorer, RandomScorer};
    use crate::toy::{toy_expert, ToyDataset, ToyEnv};

    fn toy_experts(n: usize, seed: u64) -> Vec<Trajectory> {
        ToyDataset::generate(n, 0, seed)
            .train
            .iter()
            .map(|i| toy_expert(i).unwrap())
            .collect()
    }

    #[test]
    fn oracle_scores_one_on_toy_optimum_fraction() {
        let experts = toy_experts(10, 1);
        let oracle = OraclePolicy::from_trajectories(&experts);
        let tasks: Vec<Instruction> = experts.iter().map(|e| e.instruction.clone()).collect();
        let ev = evaluate(&ToyEnv, &oracle, &tasks).unwrap();
        let best = mean(&experts.iter().map(|e| e.outcome_reward).collect::<Vec<_>>());
        assert_eq!(ev.mean_reward, best);
        assert_eq!(ev.records.len(), 10);
        assert_eq!(ev.records[3].task_id, tasks[3].task_id);
    }

    #[test]
    fn exact_scorer_accuracy_is_one_against_itself() {
        let experts = toy_experts(30, 2);
        let exact = ExactScorer::new(&UniformPolicy);
        let truth = scorer_truth(&ToyEnv, &exact);
        // A uniform agent diverges from the expert wherever the expert does not pick choice 0.
        let acc = step_reward_accuracy(&ToyEnv, &UniformPolicy, &exact, &experts, 0.0, &truth).unwrap();
        assert!(acc.n_pairs > 0);
        assert_eq!(acc.value(), Some(1.0));
    }

    #[test]
    fn no_pairs_gives_undefined_accuracy() {
        let experts = toy_experts(5, 3);
        let oracle = OraclePolicy::from_trajectories(&experts);
        let exact = ExactScorer::new(&UniformPolicy);
        let truth = scorer_truth(&ToyEnv, &exact);
        let acc = step_reward_accuracy(&ToyEnv, &oracle, &exact, &experts, 0.0, &truth).unwrap();
        assert_eq!(acc.n_pairs, 0);
        assert_eq!(acc.value(), None);
    }

    #[test]
    fn random_scorer_accuracy_is_near_one_half() {
        let experts = toy_experts(200, 4);
        let exact = ExactScorer::new(&UniformPolicy);
        let truth = scorer_truth(&ToyEnv, &exact);
        let acc = step_reward_accuracy(&ToyEnv, &UniformPolicy, &RandomScorer::new(9), &experts, 0.0, &truth)
            .unwrap()
            .value()
            .unwrap();
        assert!((acc - 0.5).abs() < 0.1, "accuracy {acc}");
    }

    #[test]
    fn avg_step_reward_matches_enumeration_for_expert_agent() {
        let experts = toy_experts(8, 5);
        let oracle = OraclePolicy::from_trajectories(&experts);
        let exact = ExactScorer::new(&UniformPolicy);
        let tasks: Vec<Instruction> = experts.iter().map(|e| e.instruction.clone()).collect();
        let (v, recs) = avg_reward_per_step(&ToyEnv, &oracle, &exact, &tasks).unwrap();
        let mut expected = Vec::new();
        for e in &experts {
            let per: Vec<f64> = (1..=e.len())
                .map(|t| exact.score(&ToyEnv, e.prefix(t + 1)).unwrap().value)
                .collect();
            expected.push(mean(&per));
        }
        assert!((v - mean(&expected)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(recs.len(), 8);
    }

    #[test]
    fn sign_test_counts_and_tail() {
        let s = sign_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!((s.wins, s.losses, s.ties), (5, 0, 0));
        assert!((s.p_value - 1.0 / 32.0).abs() < 1e-12);
        let s = sign_test(&[1.0, 0.0, -1.0], &[0.0; 3]).unwrap();
        assert_eq!((s.wins, s.losses, s.ties), (1, 1, 1));
        assert!((s.p_value - 0.75).abs() < 1e-12);
    }

    #[test]
    fn csv_has_header_and_is_deterministic() {
        let rows = vec![EvalRecord {
            task_id: "t".into(),
            reward: 0.5,
            n_steps: 3,
            terminated: Termination::Completed,
        }];
        let a = csv_bytes(&rows).unwrap();
        assert_eq!(a, csv_bytes(&rows).unwrap());
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with(&EVAL_HEADER.join(",")));
    }
}
