//! The outer loop: SFT, then per iteration explore, score, build pairs,
//! optimize against a snapshot of the current agent, evaluate and
//! checkpoint. Every artifact lives under the run directory and is hashed
//! into the manifest, so an interrupted run resumes from its last completed
//! iteration and reproduces an uninterrupted one bit for bit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ScorerMode};
use crate::dataset::Dataset;
use crate::env::store::{read_jsonl, read_trajectories, write_atomic, write_jsonl, write_trajectories};
use crate::env::{Environment, Instruction, Trajectory};
use crate::error::{Error, Result};
use crate::eval::{avg_reward_per_step, evaluate, write_csv, EVAL_HEADER, STEP_REWARD_HEADER};
use crate::manifest::{Manifest, RunLock};
use crate::mixture::{compile_step_pairs, compile_traj_pairs, optimize_iteration, MixtureEpoch};
use crate::pairs::{build_pairs, save_pairs, STEP_PAIRS_FILE, TRAJECTORIES_FILE, TRAJ_PAIRS_FILE};
use crate::policy::{checkpoint, PolicyParams};
use crate::reward_model::{collect_step_labels, train_reward_model, RewardModel};
use crate::rng::{derive_seed, fnv1a};
use crate::scorer::{ExactScorer, MonteCarloScorer, RandomScorer, StepScorer};
use crate::sft::{compile_trajectories, train_sft};
use crate::with_env;

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const FAILURE_FILE: &str = "failure.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SFT_CHECKPOINT: &str = "sft/policy.ckpt";
pub const SFT_SUMMARY: &str = "sft/summary.json";
pub const EXPERTS_FILE: &str = "experts/train.jsonl";
pub const RM_MODEL: &str = "rm/model.json";

/// One completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub n_step_pairs: usize,
    pub n_traj_pairs: usize,
    pub n_divergent: usize,
    pub train_reward: f64,
    pub test_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_unseen_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_reward_per_step: Option<f64>,
    pub loss: Vec<MixtureEpoch>,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub policy_version: u64,
    /// Hash of the frozen policy that defines step rewards (the SFT agent).
    pub scorer_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_model_sha256: Option<String>,
    /// Best test reward over iterations 1..=this one, and where it occurred.
    pub best_iteration: usize,
    pub best_test_reward: f64,
}

/// Metrics of the SFT agent, the iteration-0 baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSummary {
    pub checkpoint_sha256: String,
    pub train_action_agreement: f64,
    pub train_reward: f64,
    pub test_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_unseen_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_reward_per_step: Option<f64>,
}

/// Machine-readable record of an aborted stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    /// 0 for stages before the first iteration.
    pub iteration: usize,
    pub stage: String,
    pub error: String,
}

/// Limits on how much of the run one invocation performs.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    /// Stop once this many iterations are complete, even below the cap.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub sft: SftSummary,
    pub reports: Vec<IterationReport>,
}

pub fn read_reports(dir: &Path) -> Result<Vec<IterationReport>> {
    let path = dir.join(REPORTS_FILE);
    if path.exists() {
        read_jsonl(&path)
    } else {
        Ok(Vec::new())
    }
}

pub fn read_sft_summary(dir: &Path) -> Result<SftSummary> {
    let path = dir.join(SFT_SUMMARY);
    serde_json::from_slice(&std::fs::read(&path)?).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn iter_dir(k: usize) -> String {
    format!("iter_{k}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

struct Run<'a> {
    config: &'a RunConfig,
    dir: PathBuf,
    manifest: Manifest,
    stage: String,
    iteration: usize,
}

impl Run<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn enter(&mut self, iteration: usize, stage: &str) {
        self.iteration = iteration;
        self.stage = stage.to_string();
        log::info!("iteration {iteration}: {stage}");
    }
}

/// Runs (or resumes) the configured experiment.
pub fn run_ipr(config: &RunConfig, control: RunControl) -> Result<RunOutcome> {
    config.validate()?;
    let dir = PathBuf::from(&config.out_dir);
    let _lock = RunLock::acquire(&dir)?;
    let mut run = Run {
        config,
        manifest: Manifest::open(&dir)?,
        dir,
        stage: "setup".into(),
        iteration: 0,
    };
    match drive(&mut run, control) {
        Ok(out) => {
            let failure = run.path(FAILURE_FILE);
            if failure.exists() {
                std::fs::remove_file(failure)?;
            }
            Ok(out)
        }
        Err(e) => {
            let record = FailureRecord {
                iteration: run.iteration,
                stage: run.stage.clone(),
                error: e.to_string(),
            };
            log::error!("run aborted in {} (iteration {}): {e}", record.stage, record.iteration);
            let _ = write_json(&run.path(FAILURE_FILE), &record);
            Err(e)
        }
    }
}

fn drive(run: &mut Run<'_>, control: RunControl) -> Result<RunOutcome> {
    let rendered = run.config.render_portable();
    let config_path = run.path(CONFIG_FILE);
    if config_path.exists() {
        let existing = std::fs::read_to_string(&config_path)?;
        if existing != rendered {
            return Err(Error::config(
                "out_dir",
                format!("{} holds a run with a different configuration", run.dir.display()),
            ));
        }
        run.enter(0, "verify manifest");
        run.manifest.verify()?;
    } else {
        write_atomic(&config_path, rendered.as_bytes())?;
        run.manifest.record_tool()?;
        run.manifest.record("config", CONFIG_FILE)?;
    }

    run.enter(0, "dataset");
    let dataset = prepare_dataset(run)?;
    let handle = dataset.handle();
    with_env!(&handle, env => drive_env(run, env, &dataset, control))
}

fn prepare_dataset(run: &mut Run<'_>) -> Result<Dataset> {
    let data_dir = run.path("data");
    let env = run.config.env;
    if run.manifest.entries().iter().any(|e| e.kind == "dataset") {
        return Dataset::load_as(env, &data_dir);
    }
    let ds = match &run.config.data.path {
        Some(p) => Dataset::load_as(env, Path::new(p))?,
        None => Dataset::generate(env, &run.config.data.generation(), run.config.seed)?,
    };
    ds.save(&data_dir)?;
    for f in ds.files() {
        run.manifest.record("dataset", &format!("data/{f}"))?;
    }
    Ok(ds)
}

fn experts_for(run: &mut Run<'_>, dataset: &Dataset) -> Result<Vec<Trajectory>> {
    let path = run.path(EXPERTS_FILE);
    if run.manifest.get(EXPERTS_FILE).is_some() {
        return read_trajectories(&path);
    }
    let handle = dataset.handle();
    let experts: Vec<Trajectory> = dataset
        .train()
        .iter()
        .map(|i| handle.expert(i))
        .collect::<Result<_>>()?;
    write_trajectories(&path, &experts)?;
    run.manifest.record("experts", EXPERTS_FILE)?;
    Ok(experts)
}

fn rewards<E: Environment>(env: &E, agent: &PolicyParams, tasks: &[Instruction], csv: Option<&Path>) -> Result<f64> {
    let ev = evaluate(env, agent, tasks)?;
    if let Some(path) = csv {
        write_csv(path, EVAL_HEADER, &ev.records)?;
    }
    Ok(ev.mean_reward)
}

fn step_reward<E: Environment>(
    run: &Run<'_>,
    env: &E,
    agent: &PolicyParams,
    sft: &PolicyParams,
    tasks: &[Instruction],
    csv: &Path,
) -> Result<Option<f64>> {
    if !run.config.eval.step_reward {
        return Ok(None);
    }
    let seed = derive_seed(run.config.seed, &[fnv1a(b"step-reward")]);
    let scorer = MonteCarloScorer::new(sft, run.config.eval.step_reward_samples, seed)?
        .with_temperature(run.config.scorer.temperature);
    let (v, records) = avg_reward_per_step(env, agent, &scorer, tasks)?;
    write_csv(csv, STEP_REWARD_HEADER, &records)?;
    Ok(Some(v))
}

fn sft_stage<E: Environment>(
    run: &mut Run<'_>,
    env: &E,
    dataset: &Dataset,
    experts: &[Trajectory],
) -> Result<(PolicyParams, String)> {
    let cfg = run.config;
    let ckpt = run.path(SFT_CHECKPOINT);
    let mut agreement = None;
    if run.manifest.get(SFT_CHECKPOINT).is_none() {
        let params = match &cfg.sft.checkpoint {
            Some(p) => {
                let (params, header) = checkpoint::load(Path::new(p))?;
                if header.env != cfg.env || params.n_actions() != env.num_slots() {
                    return Err(Error::config(
                        "sft.checkpoint",
                        format!("{p} was trained for {} with {} slots", header.env, params.n_actions()),
                    ));
                }
                params
            }
            None => {
                let data = compile_trajectories(env, cfg.policy.d, experts)?;
                let init = PolicyParams::zeros(cfg.policy.d, env.num_slots());
                let out = train_sft(init, &data, &cfg.sft.training(), cfg.seed)?;
                write_csv(&run.path("sft/metrics.csv"), &["epoch", "loss", "train_action_agreement"], &out.metrics)?;
                run.manifest.record("metrics", "sft/metrics.csv")?;
                agreement = out.metrics.last().map(|m| m.train_action_agreement);
                out.params
            }
        };
        checkpoint::save(&ckpt, &params, cfg.env, &cfg.hash())?;
        run.manifest.record("checkpoint", SFT_CHECKPOINT)?;
    }
    let (sft, _) = checkpoint::load(&ckpt)?;
    let sft_hash = crate::env::store::sha256_file(&ckpt)?;
    if run.manifest.get(SFT_SUMMARY).is_none() {
        let agreement = match agreement {
            Some(a) => a,
            None => {
                let data = compile_trajectories(env, sft.d(), experts)?;
                crate::sft::action_agreement(&sft, &data)
            }
        };
        let summary = SftSummary {
            checkpoint_sha256: sft_hash.clone(),
            train_action_agreement: agreement,
            train_reward: rewards(env, &sft, dataset.train(), None)?,
            test_reward: rewards(env, &sft, dataset.test(), Some(&run.path("sft/eval_test.csv")))?,
            test_unseen_reward: dataset
                .test_unseen()
                .map(|t| rewards(env, &sft, t, None))
                .transpose()?,
            avg_reward_per_step: step_reward(run, env, &sft, &sft, dataset.test(), &run.path("sft/step_reward.csv"))?,
        };
        write_json(&run.path(SFT_SUMMARY), &summary)?;
        run.manifest.record("summary", SFT_SUMMARY)?;
        log::info!("sft: train {:.4} test {:.4}", summary.train_reward, summary.test_reward);
    }
    Ok((sft, sft_hash))
}

fn reward_model_stage<E: Environment>(
    run: &mut Run<'_>,
    env: &E,
    sft: &PolicyParams,
    experts: &[Trajectory],
) -> Result<(RewardModel, String)> {
    let cfg = run.config;
    if run.manifest.get(RM_MODEL).is_none() {
        let model = match &cfg.scorer.rm_path {
            Some(p) => RewardModel::load(Path::new(p))?,
            None => {
                let mc = MonteCarloScorer::new(sft, cfg.scorer.n_samples, cfg.seed)?
                    .with_temperature(cfg.scorer.temperature);
                let labels = collect_step_labels(env, sft, &mc, experts, derive_seed(cfg.seed, &[fnv1a(b"rm-labels")]))?;
                write_jsonl(&run.path("rm/scored_steps.jsonl"), &labels)?;
                run.manifest.record("scored_steps", "rm/scored_steps.jsonl")?;
                let out = train_reward_model(&labels, &cfg.reward_model, cfg.seed)?;
                write_csv(&run.path("rm/metrics.csv"), &["epoch", "train_mse"], &out.metrics)?;
                run.manifest.record("metrics", "rm/metrics.csv")?;
                log::info!(
                    "reward model: train mse {:.5}, held-out mse {:.5} (label variance {:.5})",
                    out.train_mse,
                    out.heldout_mse,
                    out.heldout_label_variance
                );
                write_json(
                    &run.path("rm/summary.json"),
                    &serde_json::json!({
                        "n_labels": labels.len(),
                        "initial_train_mse": out.initial_train_mse,
                        "train_mse": out.train_mse,
                        "heldout_mse": out.heldout_mse,
                        "heldout_label_variance": out.heldout_label_variance,
                    }),
                )?;
                run.manifest.record("summary", "rm/summary.json")?;
                out.model
            }
        };
        model.save(&run.path(RM_MODEL))?;
        run.manifest.record("reward_model", RM_MODEL)?;
    }
    let model = RewardModel::load(&run.path(RM_MODEL))?;
    Ok((model, crate::env::store::sha256_file(&run.path(RM_MODEL))?))
}

fn drive_env<E: Environment>(
    run: &mut Run<'_>,
    env: &E,
    dataset: &Dataset,
    control: RunControl,
) -> Result<RunOutcome> {
    let cfg = run.config;
    run.enter(0, "experts");
    let experts = experts_for(run, dataset)?;
    run.enter(0, "sft");
    let (sft, sft_hash) = sft_stage(run, env, dataset, &experts)?;

    let mut rm = None;
    let scorer: Box<dyn StepScorer<E> + '_> = match cfg.scorer.mode {
        ScorerMode::Mc => Box::new(
            MonteCarloScorer::new(&sft, cfg.scorer.n_samples, cfg.seed)?.with_temperature(cfg.scorer.temperature),
        ),
        ScorerMode::Exact => Box::new(ExactScorer::new(&sft)),
        ScorerMode::Random => Box::new(RandomScorer::new(derive_seed(cfg.seed, &[fnv1a(b"random-scorer")]))),
        ScorerMode::Rm => {
            run.enter(0, "reward model");
            let (model, hash) = reward_model_stage(run, env, &sft, &experts)?;
            rm = Some(hash);
            Box::new(model)
        }
    };

    let mut reports = read_reports(&run.dir)?;
    let mut agent = match reports.last() {
        Some(last) => {
            let path = run.path(&last.checkpoint);
            let found = crate::env::store::sha256_file(&path)?;
            if found != last.checkpoint_sha256 {
                return Err(Error::Integrity {
                    path: last.checkpoint.clone(),
                    expected: last.checkpoint_sha256.clone(),
                    found,
                });
            }
            checkpoint::load(&path)?.0
        }
        None => sft.clone(),
    };
    let mut best: Option<(usize, f64)> = reports.last().map(|r| (r.best_iteration, r.best_test_reward));

    for k in reports.len() + 1..=cfg.iterations {
        if control.stop_after.is_some_and(|s| reports.len() >= s) {
            break;
        }
        let it = iter_dir(k);
        run.enter(k, "build pairs");
        let build = build_pairs(env, &agent, scorer.as_ref(), &experts, cfg.scorer.tau)?;
        save_pairs(&run.path(&format!("{it}/pairs")), &experts, &build.step_pairs, &build.traj_pairs)?;
        write_jsonl(&run.path(&format!("{it}/scored_steps.jsonl")), &build.scored)?;
        for f in [STEP_PAIRS_FILE, TRAJ_PAIRS_FILE, TRAJECTORIES_FILE] {
            run.manifest.record("pairs", &format!("{it}/pairs/{f}"))?;
        }
        run.manifest.record("scored_steps", &format!("{it}/scored_steps.jsonl"))?;

        run.enter(k, "optimize");
        let reference = agent.clone();
        let step_pairs = compile_step_pairs(env, &reference, &build.step_pairs)?;
        let traj_pairs = compile_traj_pairs(env, &reference, &build.traj_pairs)?;
        let loss = optimize_iteration(
            &mut agent,
            &step_pairs,
            &traj_pairs,
            &cfg.optimize,
            derive_seed(cfg.seed, &[k as u64]),
        )?;
        write_csv(
            &run.path(&format!("{it}/metrics.csv")),
            &["epoch", "l_odpo", "l_sdpo", "l_sft", "l_total"],
            &loss,
        )?;
        let ckpt_rel = format!("{it}/policy.ckpt");
        let ckpt_hash = checkpoint::save(&run.path(&ckpt_rel), &agent, cfg.env, &cfg.hash())?;
        run.manifest.record("metrics", &format!("{it}/metrics.csv"))?;
        run.manifest.record("checkpoint", &ckpt_rel)?;

        run.enter(k, "evaluate");
        let test_csv = run.path(&format!("{it}/eval_test.csv"));
        let test_reward = rewards(env, &agent, dataset.test(), Some(&test_csv))?;
        run.manifest.record("eval", &format!("{it}/eval_test.csv"))?;
        let avg = step_reward(run, env, &agent, &sft, dataset.test(), &run.path(&format!("{it}/step_reward.csv")))?;
        if avg.is_some() {
            run.manifest.record("eval", &format!("{it}/step_reward.csv"))?;
        }
        if best.is_none_or(|(_, b)| test_reward > b) {
            best = Some((k, test_reward));
        }
        let (best_iteration, best_test_reward) = best.expect("set above");
        let report = IterationReport {
            iteration: k,
            n_step_pairs: build.stats.n_step_pairs,
            n_traj_pairs: build.stats.n_traj_pairs,
            n_divergent: build.stats.n_divergent,
            train_reward: rewards(env, &agent, dataset.train(), None)?,
            test_reward,
            test_unseen_reward: dataset
                .test_unseen()
                .map(|t| rewards(env, &agent, t, None))
                .transpose()?,
            avg_reward_per_step: avg,
            loss,
            checkpoint: ckpt_rel,
            checkpoint_sha256: ckpt_hash,
            policy_version: agent.version(),
            scorer_sha256: sft_hash.clone(),
            reward_model_sha256: rm.clone(),
            best_iteration,
            best_test_reward,
        };
        log::info!(
            "iteration {k}: |D_s| {} |D_t| {} train {:.4} test {:.4}",
            report.n_step_pairs,
            report.n_traj_pairs,
            report.train_reward,
            report.test_reward
        );
        reports.push(report);
        write_jsonl(&run.path(REPORTS_FILE), &reports)?;
        run.manifest.record("reports", REPORTS_FILE)?;
    }
    Ok(RunOutcome {
        dir: run.dir.clone(),
        sft: read_sft_summary(&run.dir)?,
        reports,
    })
}
