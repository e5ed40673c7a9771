//! Plot-ready tables from finished runs: per-iteration rewards with a
//! best-of row, the four-arm ablation grid, average step reward bars and the
//! accuracy-versus-samples series. Missing inputs leave explicit `NA` cells.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::driver::{read_reports, read_sft_summary, IterationReport, SftSummary, REPORTS_FILE};
use crate::env::store::{read_jsonl, write_atomic};
use crate::error::Result;

/// Ablation arms, as sub-directory names of an experiment directory.
pub const ARMS: &[&str] = &["full", "no_odpo", "no_sdpo", "no_sft"];
pub const ACCURACY_FILE: &str = "step_accuracy.jsonl";
const NA: &str = "NA";

/// One point of the accuracy-versus-N sweep, as written by the analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub seed: u64,
    pub n_samples: usize,
    pub n_pairs: usize,
    /// Absent when no pair was constructed.
    pub accuracy: Option<f64>,
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| NA.to_string(), |v| format!("{v:.6}"))
}

fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn markdown(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("## {title}\n\n| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
    out
}

struct RunTables {
    sft: Option<SftSummary>,
    reports: Vec<IterationReport>,
}

fn load_run(dir: &Path) -> Result<Option<RunTables>> {
    if !dir.join(REPORTS_FILE).exists() && !dir.join(crate::driver::SFT_SUMMARY).exists() {
        return Ok(None);
    }
    Ok(Some(RunTables {
        sft: read_sft_summary(dir).ok(),
        reports: read_reports(dir)?,
    }))
}

/// Files written by [`report_tables`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

/// Writes tables for a single run directory or an experiment directory
/// holding one run per ablation arm. Outputs go to `<root>/report/`.
pub fn report_tables(root: &Path) -> Result<ReportFiles> {
    let out_dir = root.join("report");
    let mut written = Vec::new();
    let mut md = String::from("# Run report\n\n");
    let mut emit = |name: &str, body: String| -> Result<()> {
        write_atomic(&out_dir.join(name), body.as_bytes())?;
        written.push(name.to_string());
        Ok(())
    };

    let main = match load_run(root)? {
        Some(r) => Some(r),
        None => load_run(&root.join("full"))?,
    };
    let header = ["iteration", "n_step_pairs", "n_traj_pairs", "train_reward", "test_reward", "test_unseen_reward", "avg_reward_per_step"];
    let mut rows = Vec::new();
    let mut bars = Vec::new();
    if let Some(run) = &main {
        if let Some(s) = &run.sft {
            rows.push(vec![
                "0".into(),
                NA.into(),
                NA.into(),
                cell(Some(s.train_reward)),
                cell(Some(s.test_reward)),
                cell(s.test_unseen_reward),
                cell(s.avg_reward_per_step),
            ]);
            bars.push(vec!["sft".into(), cell(s.avg_reward_per_step)]);
        }
        for r in &run.reports {
            rows.push(vec![
                r.iteration.to_string(),
                r.n_step_pairs.to_string(),
                r.n_traj_pairs.to_string(),
                cell(Some(r.train_reward)),
                cell(Some(r.test_reward)),
                cell(r.test_unseen_reward),
                cell(r.avg_reward_per_step),
            ]);
            bars.push(vec![format!("iteration_{}", r.iteration), cell(r.avg_reward_per_step)]);
        }
        if let Some(last) = run.reports.last() {
            let b = &run.reports[last.best_iteration - 1];
            rows.push(vec![
                format!("best({})", b.iteration),
                b.n_step_pairs.to_string(),
                b.n_traj_pairs.to_string(),
                cell(Some(b.train_reward)),
                cell(Some(b.test_reward)),
                cell(b.test_unseen_reward),
                cell(b.avg_reward_per_step),
            ]);
        }
    }
    md.push_str(&markdown("Iterations", &header, &rows));
    emit("iterations.csv", csv(&header, &rows))?;
    emit("step_reward.csv", csv(&["agent", "avg_reward_per_step"], &bars))?;

    let n_iter = ARMS
        .iter()
        .filter_map(|a| load_run(&root.join(a)).ok().flatten())
        .map(|r| r.reports.len())
        .max()
        .unwrap_or(0);
    let mut grid_header: Vec<String> = vec!["arm".into(), "sft".into()];
    grid_header.extend((1..=n_iter).map(|k| format!("iteration_{k}")));
    grid_header.push("best".into());
    let mut grid = Vec::new();
    for arm in ARMS {
        let run = load_run(&root.join(arm))?;
        let mut row = vec![arm.to_string()];
        row.push(cell(run.as_ref().and_then(|r| r.sft.as_ref()).map(|s| s.test_reward)));
        for k in 1..=n_iter {
            row.push(cell(run.as_ref().and_then(|r| r.reports.get(k - 1)).map(|r| r.test_reward)));
        }
        row.push(cell(run.as_ref().and_then(|r| r.reports.last()).map(|r| r.best_test_reward)));
        grid.push(row);
    }
    let gh: Vec<&str> = grid_header.iter().map(String::as_str).collect();
    md.push_str(&markdown("Ablation grid (test reward)", &gh, &grid));
    emit("ablation.csv", csv(&gh, &grid))?;

    let acc_path = root.join(ACCURACY_FILE);
    let acc_rows: Vec<Vec<String>> = if acc_path.exists() {
        read_jsonl::<AccuracyRow>(&acc_path)?
            .iter()
            .map(|r| vec![r.seed.to_string(), r.n_samples.to_string(), r.n_pairs.to_string(), cell(r.accuracy)])
            .collect()
    } else {
        Vec::new()
    };
    let ah = ["seed", "n_samples", "n_pairs", "accuracy"];
    md.push_str(&markdown("Step-reward accuracy", &ah, &acc_rows));
    emit("accuracy_vs_n.csv", csv(&ah, &acc_rows))?;
    emit("report.md", md)?;
    Ok(ReportFiles {
        dir: out_dir,
        files: written,
    })
}
