//! Command-line front end for data generation, training, pair building,
//! full runs, evaluation and analysis.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ipr::config::{default_tau, parse_config, ScorerMode};
use ipr::dataset::{DataConfig, Dataset, EnvHandle};
use ipr::driver::{run_ipr, RunControl};
use ipr::env::store::{read_jsonl, write_atomic, write_jsonl};
use ipr::env::{EnvId, Environment, Trajectory};
use ipr::eval::{
    avg_reward_per_step, evaluate, scorer_truth, shop_page_truth, step_reward_accuracy, write_csv, Truth,
    EVAL_HEADER, STEP_REWARD_HEADER,
};
use ipr::mixture::{compile_step_pairs, compile_traj_pairs, optimize_iteration, OptimizeConfig};
use ipr::pairs::{build_pairs, load_pairs, save_pairs};
use ipr::policy::{checkpoint, PolicyParams, DEFAULT_FEATURE_DIM};
use ipr::report::{report_tables, AccuracyRow};
use ipr::reward_model::{train_reward_model, RewardModel, RmConfig};
use ipr::scorer::{ExactScorer, MonteCarloScorer, RandomScorer, ScoredStep, StepScorer};
use ipr::sft::{compile_trajectories, train_sft, SftConfig};
use ipr::with_env;

#[derive(Parser)]
#[command(name = "ipr", version, about = "Iterative step-level process refinement on simulated environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (tasks, plus the catalog for ShopSim).
    GenData {
        #[arg(long)]
        env: EnvId,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavior-clone the expert planner.
    Sft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
        d: usize,
        /// Per-epoch CSV; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Explore along the experts, score divergent steps and write D_s and D_t.
    BuildPairs(BuildPairsArgs),
    /// One round of mixture preference optimization.
    Optimize(OptimizeArgs),
    /// Run or resume a configured experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stop after this many completed iterations (resume later).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        agent: PathBuf,
        /// train, test, seen or unseen.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step-reward analyses.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Fit the step reward model on a scored-step dump.
    TrainRm {
        #[arg(long)]
        steps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
    },
    /// Tables and plot-ready CSVs for a run or experiment directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Checkpoint utilities.
    #[command(subcommand)]
    Policy(PolicyCommand),
}

#[derive(Args)]
struct BuildPairsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    agent: PathBuf,
    /// Frozen scorer policy (normally the SFT checkpoint).
    #[arg(long)]
    scorer: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Pair margin; the environment's default when omitted.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "mc")]
    scorer_mode: Mode,
    /// Reward model for `--scorer-mode rm`.
    #[arg(long)]
    rm: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    agent: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_odpo: bool,
    #[arg(long)]
    no_sdpo: bool,
    #[arg(long)]
    no_sft: bool,
    /// Per-epoch CSV; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    Mc,
    Exact,
    Rm,
    Random,
}

impl From<Mode> for ScorerMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Mc => ScorerMode::Mc,
            Mode::Exact => ScorerMode::Exact,
            Mode::Rm => ScorerMode::Rm,
            Mode::Random => ScorerMode::Random,
        }
    }
}

#[derive(Subcommand)]
enum Analyze {
    /// Agreement of scorer-imposed action orders with the ground-truth grader,
    /// swept over the number of rollouts.
    StepAccuracy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 0.35)]
        tau: f64,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// JSONL output; `report` picks up `<dir>/step_accuracy.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Average Monte-Carlo step reward along the agent's greedy test trajectories.
    StepReward {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Print a checkpoint's header and weight statistics.
    Inspect { checkpoint: PathBuf },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { env, seed, out } => {
            let ds = Dataset::generate(env, &DataConfig::default(), seed)?;
            ds.save(&out)?;
            println!("{} dataset: {} train, {} test tasks in {}", env, ds.train().len(), ds.test().len(), out.display());
        }
        Command::Sft { data, out, seed, d, metrics } => {
            let ds = Dataset::load(&data)?;
            let handle = ds.handle();
            let experts = experts(&handle, &ds)?;
            let outcome = with_env!(&handle, env => {
                let compiled = compile_trajectories(env, d, &experts)?;
                train_sft(PolicyParams::zeros(d, env.num_slots()), &compiled, &SftConfig::default(), seed)?
            });
            checkpoint::save(&out, &outcome.params, ds.env_id(), "")?;
            write_csv(
                &metrics.unwrap_or_else(|| sidecar(&out, "metrics.csv")),
                &["epoch", "loss", "train_action_agreement"],
                &outcome.metrics,
            )?;
            if let Some(last) = outcome.metrics.last() {
                println!("sft: loss {:.6}, train action agreement {:.4}", last.loss, last.train_action_agreement);
            }
        }
        Command::BuildPairs(a) => build_pairs_cmd(a)?,
        Command::Optimize(a) => optimize_cmd(a)?,
        Command::Run { config, stop_after } => {
            let cfg = parse_config(&config)?;
            let out = run_ipr(&cfg, RunControl { stop_after })?;
            println!("sft test reward {:.4}", out.sft.test_reward);
            for r in &out.reports {
                println!(
                    "iteration {}: |D_s| {} |D_t| {} test reward {:.4} (best {:.4} at {})",
                    r.iteration, r.n_step_pairs, r.n_traj_pairs, r.test_reward, r.best_test_reward, r.best_iteration
                );
            }
        }
        Command::Eval { data, agent, split, out } => {
            let ds = Dataset::load(&data)?;
            let params = load_agent(&agent, &ds)?;
            let tasks = ds.split(&split)?;
            let handle = ds.handle();
            let ev = with_env!(&handle, env => evaluate(env, &params, tasks)?);
            write_csv(&out, EVAL_HEADER, &ev.records)?;
            println!("{split}: mean reward {:.4} over {} tasks", ev.mean_reward, ev.records.len());
        }
        Command::Analyze(a) => analyze_cmd(a)?,
        Command::TrainRm { steps, out, seed, lr, epochs, d } => {
            let dump: Vec<ScoredStep> = read_jsonl(&steps)?;
            let defaults = RmConfig::default();
            let cfg = RmConfig {
                learning_rate: lr.unwrap_or(defaults.learning_rate),
                epochs: epochs.unwrap_or(defaults.epochs),
                d: d.unwrap_or(defaults.d),
                ..defaults
            };
            let o = train_reward_model(&dump, &cfg, seed)?;
            o.model.save(&out)?;
            write_csv(&sidecar(&out, "metrics.csv"), &["epoch", "train_mse"], &o.metrics)?;
            println!(
                "reward model: train mse {:.5} (from {:.5}), held-out mse {:.5}, held-out label variance {:.5}",
                o.train_mse, o.initial_train_mse, o.heldout_mse, o.heldout_label_variance
            );
        }
        Command::Report { run } => {
            let files = report_tables(&run)?;
            for f in files.files {
                println!("{}", files.dir.join(f).display());
            }
        }
        Command::Policy(PolicyCommand::Inspect { checkpoint: path }) => {
            let (params, header) = checkpoint::load(&path)?;
            println!("{}", serde_json::to_string_pretty(&header)?);
            println!("l2 norm {:.6}, max |w| {:.6}", params.l2_norm(), params.max_abs());
            for (slot, n) in params.column_norms().iter().enumerate() {
                println!("slot {slot:>3}: column norm {n:.6}");
            }
        }
    }
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn experts(handle: &EnvHandle, ds: &Dataset) -> Result<Vec<Trajectory>> {
    ds.train()
        .iter()
        .map(|i| handle.expert(i).map_err(Into::into))
        .collect()
}

fn load_agent(path: &Path, ds: &Dataset) -> Result<PolicyParams> {
    let (params, header) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if header.env != ds.env_id() {
        bail!("{} was trained for {}, but the data is {}", path.display(), header.env, ds.env_id());
    }
    Ok(params)
}

fn build_pairs_cmd(a: BuildPairsArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let agent = load_agent(&a.agent, &ds)?;
    let scorer_params = load_agent(&a.scorer, &ds)?;
    let handle = ds.handle();
    let experts = experts(&handle, &ds)?;
    let tau = a.tau.unwrap_or_else(|| default_tau(ds.env_id()));
    let rm = match (ScorerMode::from(a.scorer_mode), &a.rm) {
        (ScorerMode::Rm, Some(p)) => Some(RewardModel::load(p)?),
        (ScorerMode::Rm, None) => bail!("--scorer-mode rm needs --rm"),
        _ => None,
    };
    let stats = with_env!(&handle, env => {
        let scorer = make_scorer(a.scorer_mode.into(), &scorer_params, rm.as_ref(), a.n, a.seed)?;
        let build = build_pairs(env, &agent, scorer.as_ref(), &experts, tau)?;
        save_pairs(&a.out, &experts, &build.step_pairs, &build.traj_pairs)?;
        write_jsonl(&a.out.join("scored_steps.jsonl"), &build.scored)?;
        build.stats
    });
    write_atomic(&a.out.join("stats.json"), &serde_json::to_vec_pretty(&stats)?)?;
    println!(
        "{} experts, {} divergent steps, |D_s| {}, |D_t| {}",
        stats.n_experts, stats.n_divergent, stats.n_step_pairs, stats.n_traj_pairs
    );
    Ok(())
}

fn make_scorer<'a, E: Environment>(
    mode: ScorerMode,
    policy: &'a PolicyParams,
    rm: Option<&'a RewardModel>,
    n: usize,
    seed: u64,
) -> Result<Box<dyn StepScorer<E> + 'a>> {
    Ok(match mode {
        ScorerMode::Mc => Box::new(MonteCarloScorer::new(policy, n, seed)?),
        ScorerMode::Exact => Box::new(ExactScorer::new(policy)),
        ScorerMode::Random => Box::new(RandomScorer::new(seed)),
        ScorerMode::Rm => Box::new(rm.context("reward model missing")?.clone()),
    })
}

fn optimize_cmd(a: OptimizeArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let mut agent = load_agent(&a.agent, &ds)?;
    let reference = load_agent(&a.reference, &ds)?;
    let (step_pairs, traj_pairs) = load_pairs(&a.pairs)?;
    let defaults = OptimizeConfig::default();
    let cfg = OptimizeConfig {
        beta: a.beta,
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        no_odpo: a.no_odpo,
        no_sdpo: a.no_sdpo,
        no_sft: a.no_sft,
        ..defaults
    };
    let handle = ds.handle();
    let metrics = with_env!(&handle, env => {
        let sp = compile_step_pairs(env, &reference, &step_pairs)?;
        let tp = compile_traj_pairs(env, &reference, &traj_pairs)?;
        optimize_iteration(&mut agent, &sp, &tp, &cfg, a.seed)?
    });
    checkpoint::save(&a.out, &agent, ds.env_id(), "")?;
    write_csv(
        &a.metrics.unwrap_or_else(|| sidecar(&a.out, "metrics.csv")),
        &["epoch", "l_odpo", "l_sdpo", "l_sft", "l_total"],
        &metrics,
    )?;
    if let (Some(first), Some(last)) = (metrics.first(), metrics.last()) {
        println!("total loss {:.6} -> {:.6} over {} epochs", first.l_total, last.l_total, last.epoch);
    }
    Ok(())
}

fn analyze_cmd(a: Analyze) -> Result<()> {
    match a {
        Analyze::StepAccuracy { data, agent, scorer, n, tau, seeds, out } => {
            let ds = Dataset::load(&data)?;
            let agent = load_agent(&agent, &ds)?;
            let scorer_params = load_agent(&scorer, &ds)?;
            let handle = ds.handle();
            let experts = experts(&handle, &ds)?;
            let mut rows = Vec::new();
            for &seed in &seeds {
                for &k in &n {
                    let acc = match &handle {
                        EnvHandle::Shop(env) => {
                            let truth = shop_page_truth(env);
                            let mc = MonteCarloScorer::new(&scorer_params, k, seed)?;
                            step_reward_accuracy(env, &agent, &mc, &experts, tau, &truth as &Truth<'_>)?
                        }
                        EnvHandle::Toy(env) => {
                            let exact = ExactScorer::new(&scorer_params);
                            let truth = scorer_truth(env, &exact);
                            let mc = MonteCarloScorer::new(&scorer_params, k, seed)?;
                            step_reward_accuracy(env, &agent, &mc, &experts, tau, &truth as &Truth<'_>)?
                        }
                        EnvHandle::House(_) => bail!("step accuracy needs a ground-truth grader (shopsim or toy)"),
                    };
                    let accuracy = acc.value();
                    match accuracy {
                        Some(v) => println!("seed {seed} N={k}: {} pairs, accuracy {v:.4}", acc.n_pairs),
                        None => println!("seed {seed} N={k}: no pairs"),
                    }
                    rows.push(AccuracyRow { seed, n_samples: k, n_pairs: acc.n_pairs, accuracy });
                }
            }
            write_jsonl(&out, &rows)?;
        }
        Analyze::StepReward { data, agent, scorer, n, seed, out } => {
            let ds = Dataset::load(&data)?;
            let agent = load_agent(&agent, &ds)?;
            let scorer_params = load_agent(&scorer, &ds)?;
            let handle = ds.handle();
            let (v, records) = with_env!(&handle, env => {
                let mc = MonteCarloScorer::new(&scorer_params, n, seed)?;
                avg_reward_per_step(env, &agent, &mc, ds.test())?
            });
            write_csv(&out, STEP_REWARD_HEADER, &records)?;
            println!("average reward per step {v:.4} over {} tasks", records.len());
        }
    }
    Ok(())
}
