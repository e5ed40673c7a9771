//! Mixture preference optimization: outcome-level DPO on trajectory pairs,
//! step-level DPO on prefix-conditioned suffix pairs, and a likelihood term
//! on the winning trajectories.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::pairs::{ContrastiveStepPair, ContrastiveTrajPair};
use crate::policy::{compile_steps, sequence_logprob, Decision, PolicyParams};
use crate::rng::named_stream;
use crate::sft::{ordered_grad, ordered_sum, INCREASE_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub no_odpo: bool,
    pub no_sdpo: bool,
    pub no_sft: bool,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            beta: 0.2,
            learning_rate: 0.002,
            epochs: 20,
            batch_size: 32,
            no_odpo: false,
            no_sdpo: false,
            no_sft: false,
        }
    }
}

impl OptimizeConfig {
    pub fn terms(&self) -> Terms {
        Terms {
            odpo: !self.no_odpo,
            sdpo: !self.no_sdpo,
            sft: !self.no_sft,
        }
    }
}

/// Which loss terms enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub odpo: bool,
    pub sdpo: bool,
    pub sft: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        odpo: true,
        sdpo: true,
        sft: true,
    };
    pub const NONE: Terms = Terms {
        odpo: false,
        sdpo: false,
        sft: false,
    };
}

/// A preference pair reduced to teacher-forced decisions, with the
/// reference policy's log-ratio frozen at compile time.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPair {
    pub win: Vec<Decision>,
    pub lose: Vec<Decision>,
    /// `log pi_ref(win) - log pi_ref(lose)`.
    pub ref_margin: f64,
}

impl CompiledPair {
    pub fn new(reference: &PolicyParams, win: Vec<Decision>, lose: Vec<Decision>) -> Self {
        let ref_margin = sequence_logprob(reference, &win) - sequence_logprob(reference, &lose);
        CompiledPair { win, lose, ref_margin }
    }

    /// `(log pi(win) - log pi_ref(win)) - (log pi(lose) - log pi_ref(lose))`.
    pub fn margin(&self, params: &PolicyParams) -> f64 {
        sequence_logprob(params, &self.win) - sequence_logprob(params, &self.lose) - self.ref_margin
    }
}

pub fn compile_step_pairs<E: Environment>(
    env: &E,
    reference: &PolicyParams,
    pairs: &[ContrastiveStepPair],
) -> Result<Vec<CompiledPair>> {
    let d = reference.d();
    pairs
        .par_iter()
        .map(|p| {
            let inst = &p.prefix.instruction;
            let win = compile_steps(env, d, inst, &p.prefix.steps, &p.win_suffix.steps)?;
            let lose = compile_steps(env, d, inst, &p.prefix.steps, &p.lose_suffix.steps)?;
            Ok(CompiledPair::new(reference, win, lose))
        })
        .collect()
}

pub fn compile_traj_pairs<E: Environment>(
    env: &E,
    reference: &PolicyParams,
    pairs: &[ContrastiveTrajPair],
) -> Result<Vec<CompiledPair>> {
    let d = reference.d();
    pairs
        .par_iter()
        .map(|p| {
            let win = compile_steps(env, d, &p.instruction, &[], &p.win_traj.steps)?;
            let lose = compile_steps(env, d, &p.instruction, &[], &p.lose_traj.steps)?;
            Ok(CompiledPair::new(reference, win, lose))
        })
        .collect()
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-log sigmoid(beta * margin)` over the pairs; 0 when empty.
pub fn dpo_loss(params: &PolicyParams, pairs: &[CompiledPair], beta: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    ordered_sum(pairs, |p| softplus(-beta * p.margin(params))) / pairs.len() as f64
}

/// Gradient of the mean DPO loss over `pairs`.
pub fn dpo_gradient(params: &PolicyParams, pairs: &[&CompiledPair], beta: f64) -> Vec<f64> {
    let n = pairs.len().max(1) as f64;
    ordered_grad(params, pairs, |p, g| {
        let coef = -beta * sigmoid(-beta * p.margin(params)) / n;
        for d in &p.win {
            d.accumulate_grad(params, coef, g);
        }
        for d in &p.lose {
            d.accumulate_grad(params, -coef, g);
        }
    })
}

/// Mean negative log-likelihood of the win sides.
pub fn win_nll(params: &PolicyParams, pairs: &[CompiledPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    -ordered_sum(pairs, |p| sequence_logprob(params, &p.win)) / pairs.len() as f64
}

pub fn win_nll_gradient(params: &PolicyParams, pairs: &[&CompiledPair]) -> Vec<f64> {
    let scale = -1.0 / pairs.len().max(1) as f64;
    ordered_grad(params, pairs, |p, g| {
        for d in &p.win {
            d.accumulate_grad(params, scale, g);
        }
    })
}

/// The three loss terms and their enabled sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub odpo: f64,
    pub sdpo: f64,
    pub sft: f64,
    pub total: f64,
}

pub fn total_loss(
    params: &PolicyParams,
    step_pairs: &[CompiledPair],
    traj_pairs: &[CompiledPair],
    beta: f64,
    terms: Terms,
) -> LossTerms {
    let odpo = dpo_loss(params, traj_pairs, beta);
    let sdpo = dpo_loss(params, step_pairs, beta);
    let sft = win_nll(params, traj_pairs);
    let mut total = 0.0;
    if terms.odpo {
        total += odpo;
    }
    if terms.sdpo {
        total += sdpo;
    }
    if terms.sft {
        total += sft;
    }
    LossTerms {
        odpo,
        sdpo,
        sft,
        total,
    }
}

/// Gradient of the enabled terms, each a mean over its own pairs.
pub fn total_gradient(
    params: &PolicyParams,
    step_pairs: &[&CompiledPair],
    traj_pairs: &[&CompiledPair],
    beta: f64,
    terms: Terms,
) -> Vec<f64> {
    let mut grad = params.zero_grad();
    let mut add = |g: Vec<f64>| {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    };
    if terms.odpo && !traj_pairs.is_empty() {
        add(dpo_gradient(params, traj_pairs, beta));
    }
    if terms.sdpo && !step_pairs.is_empty() {
        add(dpo_gradient(params, step_pairs, beta));
    }
    if terms.sft && !traj_pairs.is_empty() {
        add(win_nll_gradient(params, traj_pairs));
    }
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEpoch {
    pub epoch: usize,
    pub l_odpo: f64,
    pub l_sdpo: f64,
    pub l_sft: f64,
    pub l_total: f64,
}

impl MixtureEpoch {
    fn new(epoch: usize, l: LossTerms) -> Self {
        MixtureEpoch {
            epoch,
            l_odpo: l.odpo,
            l_sdpo: l.sdpo,
            l_sft: l.sft,
            l_total: l.total,
        }
    }
}

/// Contiguous share `b` of `n` items split into `parts` batches.
fn share(n: usize, parts: usize, b: usize) -> std::ops::Range<usize> {
    (b * n / parts)..((b + 1) * n / parts)
}

/// Mini-batch gradient descent on the mixture loss.
///
/// Both pair sets are shuffled independently each epoch and cut into the
/// same number of batches, so every batch holds a proportional slice of
/// each. An epoch that raises the loss is undone and the learning rate
/// halved. On a non-finite loss, `params` is left at the last good epoch
/// and an error is returned.
pub fn optimize_iteration(
    params: &mut PolicyParams,
    step_pairs: &[CompiledPair],
    traj_pairs: &[CompiledPair],
    config: &OptimizeConfig,
    seed: u64,
) -> Result<Vec<MixtureEpoch>> {
    if config.batch_size == 0 {
        return Err(Error::config("optimize.batch_size", "must be positive"));
    }
    if !(config.beta > 0.0) {
        return Err(Error::config("optimize.beta", "must be positive"));
    }
    let terms = config.terms();
    let initial = total_loss(params, step_pairs, traj_pairs, config.beta, terms);
    let mut metrics = vec![MixtureEpoch::new(0, initial)];
    if step_pairs.is_empty() && traj_pairs.is_empty() {
        log::warn!("no preference pairs; parameters left unchanged");
        return Ok(metrics);
    }
    let mut prev = initial.total;
    let mut lr = config.learning_rate;
    let bs = config.batch_size;
    let n_batches = step_pairs
        .len()
        .div_ceil(bs)
        .max(traj_pairs.len().div_ceil(bs))
        .max(1);
    for epoch in 1..=config.epochs {
        let snapshot = params.clone();
        let mut s_order: Vec<usize> = (0..step_pairs.len()).collect();
        let mut t_order: Vec<usize> = (0..traj_pairs.len()).collect();
        s_order.shuffle(&mut named_stream(seed, "mixture-step-shuffle", epoch as u64));
        t_order.shuffle(&mut named_stream(seed, "mixture-traj-shuffle", epoch as u64));
        for b in 0..n_batches {
            let sb: Vec<&CompiledPair> = s_order[share(s_order.len(), n_batches, b)]
                .iter()
                .map(|&i| &step_pairs[i])
                .collect();
            let tb: Vec<&CompiledPair> = t_order[share(t_order.len(), n_batches, b)]
                .iter()
                .map(|&i| &traj_pairs[i])
                .collect();
            let grad = total_gradient(params, &sb, &tb, config.beta, terms);
            params.descend(&grad, lr);
        }
        let loss = total_loss(params, step_pairs, traj_pairs, config.beta, terms);
        if !loss.total.is_finite() {
            *params = snapshot;
            return Err(Error::NonFinite {
                epoch,
                detail: format!("mixture loss {:?} at learning rate {lr}", loss),
            });
        }
        if loss.total > prev + INCREASE_TOLERANCE {
            log::warn!(
                "mixture epoch {epoch}: loss rose {prev:.6} -> {:.6}, halving learning rate",
                loss.total
            );
            *params = snapshot;
            lr /= 2.0;
            continue;
        }
        prev = loss.total;
        log::info!("mixture epoch {epoch}: total {:.6}", loss.total);
        metrics.push(MixtureEpoch::new(epoch, loss));
    }
    Ok(metrics)
}
