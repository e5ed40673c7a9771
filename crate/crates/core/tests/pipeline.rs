//! End-to-end checks of the iteration driver: fixed points, determinism,
//! resume, integrity refusal, report layout and the reward-model arm.

use std::collections::BTreeMap;
use std::path::Path;

use ipr::config::{RunConfig, ScorerMode};
use ipr::dataset::{DataConfig, Dataset};
use ipr::driver::{read_reports, run_ipr, RunControl, RM_MODEL};
use ipr::env::{EnvId, OraclePolicy, Trajectory, UniformPolicy};
use ipr::manifest::{Manifest, MANIFEST_FILE};
use ipr::mixture::{optimize_iteration, OptimizeConfig};
use ipr::pairs::build_pairs;
use ipr::policy::PolicyParams;
use ipr::report::report_tables;
use ipr::scorer::MonteCarloScorer;
use ipr::Error;

fn toy_config(dir: &Path, iterations: usize) -> RunConfig {
    let mut c = RunConfig::new(EnvId::Toy, 7);
    c.out_dir = dir.display().to_string();
    c.iterations = iterations;
    c.data.toy_train = 60;
    c.data.toy_test = 20;
    c
}

/// Every file under `dir` except the timestamped manifest, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                if rel != MANIFEST_FILE {
                    out.insert(rel, std::fs::read(&p).unwrap());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let (x, y) = (snapshot(a), snapshot(b));
    assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>());
    for (k, v) in &x {
        assert!(v == &y[k], "{k} differs");
    }
}

#[test]
fn expert_agent_is_a_fixed_point() {
    for env in [EnvId::Toy, EnvId::ShopSim] {
        let ds = Dataset::generate(env, &DataConfig::default(), 3).unwrap();
        let handle = ds.handle();
        let experts: Vec<Trajectory> = ds.train().iter().map(|i| handle.expert(i).unwrap()).collect();
        let agent = OraclePolicy::from_trajectories(&experts);
        let build = ipr::with_env!(&handle, e => {
            let scorer = MonteCarloScorer::new(&UniformPolicy, 3, 1).unwrap();
            build_pairs(e, &agent, &scorer, &experts, 0.01).unwrap()
        });
        assert_eq!(build.stats.n_divergent, 0, "{env}");
        assert!(build.step_pairs.is_empty() && build.traj_pairs.is_empty(), "{env}");

        let mut params = PolicyParams::zeros(8, handle.num_slots());
        params.weights_mut()[3] = 0.25;
        let before = params.clone();
        let metrics = optimize_iteration(&mut params, &[], &[], &OptimizeConfig::default(), 1).unwrap();
        assert_eq!(params, before);
        assert_eq!(metrics.len(), 1);
    }
}

#[test]
fn runs_are_byte_identical_across_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_ipr(&toy_config(a.path(), 2), RunControl::default()).unwrap();
    run_ipr(&toy_config(b.path(), 2), RunControl::default()).unwrap();
    assert_same_tree(a.path(), b.path());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let whole = tempfile::tempdir().unwrap();
    let parts = tempfile::tempdir().unwrap();
    let full = run_ipr(&toy_config(whole.path(), 3), RunControl::default()).unwrap();
    let first = run_ipr(&toy_config(parts.path(), 3), RunControl { stop_after: Some(1) }).unwrap();
    assert_eq!(first.reports.len(), 1);
    let rest = run_ipr(&toy_config(parts.path(), 3), RunControl::default()).unwrap();
    assert_eq!(rest.reports, full.reports);
    assert_same_tree(whole.path(), parts.path());
    // A finished run is a no-op when invoked again.
    let again = run_ipr(&toy_config(parts.path(), 3), RunControl::default()).unwrap();
    assert_eq!(again.reports, full.reports);
}

#[test]
fn manifest_covers_artifacts_and_refuses_edits() {
    let dir = tempfile::tempdir().unwrap();
    run_ipr(&toy_config(dir.path(), 1), RunControl::default()).unwrap();
    let m = Manifest::open(dir.path()).unwrap();
    let kinds: std::collections::BTreeSet<&str> = m.entries().iter().map(|e| e.kind.as_str()).collect();
    for k in ["tool", "config", "dataset", "checkpoint"] {
        assert!(kinds.contains(k), "missing {k} entry");
    }
    assert!(m.entries().len() >= 4);

    let mut changed = toy_config(dir.path(), 1);
    changed.optimize.beta = 0.5;
    assert!(run_ipr(&changed, RunControl::default()).is_err());

    let train = dir.path().join("data/train.jsonl");
    let mut text = std::fs::read_to_string(&train).unwrap();
    text.push('\n');
    std::fs::write(&train, text).unwrap();
    let err = run_ipr(&toy_config(dir.path(), 1), RunControl::default()).unwrap_err();
    assert!(matches!(err, Error::Integrity { ref path, .. } if path == "data/train.jsonl"), "{err}");
}

#[test]
fn report_marks_missing_arms() {
    let root = tempfile::tempdir().unwrap();
    let full = root.path().join("full");
    let mut cfg = toy_config(&full, 2);
    run_ipr(&cfg, RunControl::default()).unwrap();
    cfg.out_dir = root.path().join("no_sft").display().to_string();
    cfg.optimize.no_sft = true;
    run_ipr(&cfg, RunControl::default()).unwrap();

    let files = report_tables(root.path()).unwrap();
    for f in ["iterations.csv", "step_reward.csv", "ablation.csv", "accuracy_vs_n.csv", "report.md"] {
        assert!(files.files.iter().any(|x| x == f), "{f}");
    }
    let iterations = std::fs::read_to_string(files.dir.join("iterations.csv")).unwrap();
    let lines: Vec<&str> = iterations.lines().collect();
    assert_eq!(lines.len(), 1 + 1 + 2 + 1);
    assert!(lines[1].starts_with("0,"));
    assert!(lines[4].starts_with("best("));

    let ablation = std::fs::read_to_string(files.dir.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = ablation.lines().collect();
    assert_eq!(rows[0], "arm,sft,iteration_1,iteration_2,best");
    assert!(rows[1].starts_with("full,") && !rows[1].contains("NA"));
    assert_eq!(rows[2], "no_odpo,NA,NA,NA,NA");
    assert!(rows[4].starts_with("no_sft,") && !rows[4].contains("NA"));
    let accuracy = std::fs::read_to_string(files.dir.join("accuracy_vs_n.csv")).unwrap();
    assert_eq!(accuracy, "seed,n_samples,n_pairs,accuracy\n");
}

#[test]
fn reward_model_arm_builds_step_pairs_on_shopsim() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(EnvId::ShopSim, 1);
    cfg.out_dir = dir.path().display().to_string();
    cfg.iterations = 1;
    cfg.scorer.mode = ScorerMode::Rm;
    let out = run_ipr(&cfg, RunControl::default()).unwrap();
    let r = &out.reports[0];
    assert!(r.n_step_pairs > 0);
    assert!(r.reward_model_sha256.is_some());
    assert!(dir.path().join(RM_MODEL).exists());
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("rm/summary.json")).unwrap()).unwrap();
    assert!(summary["train_mse"].as_f64().unwrap() < summary["initial_train_mse"].as_f64().unwrap());
    assert_eq!(read_reports(dir.path()).unwrap(), out.reports);
}
