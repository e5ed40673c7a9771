use std::collections::{HashMap, VecDeque};

use super::{apply_op, check_goal, house_task, valid_ops, GridHouse, HouseAction, HouseState, Op, MAX_TURNS};
use crate::env::{self, Action, Instruction, Step, Termination, Trajectory};
use crate::error::{Error, Result};

/// Breadth-first search for a shortest operation sequence.
///
/// Successors are expanded in slot order, so among shortest plans the one
/// that is first in canonical action order wins. With `relevant_only`,
/// closing receptacles and picking up anything but the goal object are
/// skipped; neither can shorten a plan for these goals, so the returned
/// length is still optimal.
pub(crate) fn bfs(start: &HouseState, max_depth: usize, relevant_only: bool) -> Option<Vec<Op>> {
    if check_goal(start, &start.goal) {
        return Some(Vec::new());
    }
    let goal = start.goal;
    let mut states: Vec<HouseState> = vec![start.clone()];
    let mut parent: Vec<Option<(usize, Op)>> = vec![None];
    let mut depth: Vec<usize> = vec![0];
    let mut seen: HashMap<HouseState, usize> = HashMap::new();
    seen.insert(start.clone(), 0);
    let mut queue = VecDeque::from([0usize]);

    while let Some(i) = queue.pop_front() {
        if depth[i] >= max_depth {
            continue;
        }
        for op in valid_ops(&states[i]) {
            if relevant_only {
                match op {
                    Op::Close(_) => continue,
                    Op::Take(o, _) if o != goal.object => continue,
                    _ => {}
                }
            }
            let Some(next) = apply_op(&states[i], op) else {
                continue;
            };
            if seen.contains_key(&next) {
                continue;
            }
            let j = states.len();
            let reached = check_goal(&next, &goal);
            seen.insert(next.clone(), j);
            states.push(next);
            parent.push(Some((i, op)));
            depth.push(depth[i] + 1);
            if reached {
                let mut ops = Vec::new();
                let mut k = j;
                while let Some((p, op)) = parent[k] {
                    ops.push(op);
                    k = p;
                }
                ops.reverse();
                return Some(ops);
            }
            queue.push_back(j);
        }
    }
    None
}

/// Shortest action sequence solving `state`'s goal within the turn budget.
pub fn plan(state: &HouseState) -> Option<Vec<HouseAction>> {
    bfs(state, MAX_TURNS, true).map(|ops| ops.into_iter().map(Op::to_action).collect())
}

/// Expert trajectory from the BFS planner.
pub fn house_expert(env: &GridHouse, instruction: &Instruction) -> Result<Trajectory> {
    let task = house_task(instruction)?;
    let start = HouseState::from_task(task)?;
    if check_goal(&start, &start.goal) {
        return Err(Error::DatasetGeneration(format!(
            "task {}: goal already satisfied at reset",
            instruction.task_id
        )));
    }
    let actions = plan(&start).ok_or_else(|| {
        Error::DatasetGeneration(format!(
            "task {}: goal unreachable within {MAX_TURNS} turns",
            instruction.task_id
        ))
    })?;
    let mut state = env::reset(env, instruction)?;
    let mut steps = Vec::with_capacity(actions.len());
    for a in actions {
        let action = Action::House(a);
        let (next, obs, _) = env::step(env, &state, &action)?;
        steps.push(Step::new(action, obs));
        state = next;
    }
    let outcome_reward = env::score_outcome(env, &state)?;
    if state.terminal != Some(Termination::Completed) {
        return Err(Error::DatasetGeneration(format!(
            "task {}: plan did not complete the task",
            instruction.task_id
        )));
    }
    Ok(Trajectory {
        instruction: instruction.clone(),
        steps,
        outcome_reward,
        terminated: Termination::Completed,
    })
}
