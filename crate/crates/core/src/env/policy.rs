use std::collections::HashMap;

use rand::Rng;

use super::{Action, LegalAction, PrefixView};

/// Anything that scores the legal actions of a history.
pub trait Policy: Sync {
    /// One logit per entry of `legal`, in the same order.
    fn logits(&self, prefix: PrefixView<'_>, legal: &[LegalAction]) -> Vec<f64>;
}

/// Draws an index from `softmax(logits / temperature)`.
///
/// Temperature 0 is argmax; ties go to the lowest index.
pub fn sample_index<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    assert!(!logits.is_empty(), "sampling from an empty action set");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if temperature <= 0.0 {
        return logits
            .iter()
            .position(|&l| l == max)
            .unwrap_or(0);
    }
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| {
            if l == f64::NEG_INFINITY {
                0.0
            } else {
                ((l - max) / temperature).exp()
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding can leave u marginally above the last bucket.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Equal logits for every legal action.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn logits(&self, _prefix: PrefixView<'_>, legal: &[LegalAction]) -> Vec<f64> {
        vec![0.0; legal.len()]
    }
}

/// Emits a fixed action sequence, indexed by absolute step position.
///
/// Falls back to uniform logits when the script runs out or its action is
/// not legal.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    actions: Vec<Action>,
}

impl ScriptedPolicy {
    pub fn new(actions: Vec<Action>) -> Self {
        ScriptedPolicy { actions }
    }
}

fn one_hot_logits(target: Option<&Action>, legal: &[LegalAction]) -> Vec<f64> {
    match target.and_then(|a| legal.iter().position(|l| &l.action == a)) {
        Some(i) => (0..legal.len())
            .map(|j| if i == j { 0.0 } else { f64::NEG_INFINITY })
            .collect(),
        None => vec![0.0; legal.len()],
    }
}

impl Policy for ScriptedPolicy {
    fn logits(&self, prefix: PrefixView<'_>, legal: &[LegalAction]) -> Vec<f64> {
        one_hot_logits(self.actions.get(prefix.steps.len()), legal)
    }
}

/// Replays stored expert plans, keyed by task id.
#[derive(Debug, Clone, Default)]
pub struct OraclePolicy {
    plans: HashMap<String, Vec<Action>>,
}

impl OraclePolicy {
    pub fn from_trajectories<'a>(experts: impl IntoIterator<Item = &'a super::Trajectory>) -> Self {
        let plans = experts
            .into_iter()
            .map(|t| {
                (
                    t.instruction.task_id.clone(),
                    t.steps.iter().map(|s| s.action.clone()).collect(),
                )
            })
            .collect();
        OraclePolicy { plans }
    }
}

impl Policy for OraclePolicy {
    fn logits(&self, prefix: PrefixView<'_>, legal: &[LegalAction]) -> Vec<f64> {
        let target = self
            .plans
            .get(&prefix.instruction.task_id)
            .and_then(|plan| plan.get(prefix.steps.len()));
        one_hot_logits(target, legal)
    }
}
