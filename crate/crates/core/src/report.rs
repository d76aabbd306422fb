//! Evaluation rows, run reports and comparison tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// One evaluation of the model trained through `trained_through` on task `task`'s
/// test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub trained_through: usize,
    pub task: usize,
    pub kind: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Value right after task `task` finished minus the current value.
    pub forgetting_psnr_db: f64,
    pub forgetting_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAverage {
    pub trained_through: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub config: RunConfig,
    pub rows: Vec<EvalRow>,
    pub averages: Vec<StageAverage>,
}

pub const CSV_HEADER: &str =
    "trained_through,task,kind,psnr_db,ssim,forgetting_psnr_db,forgetting_ssim";

impl TaskReport {
    pub fn new(config: RunConfig) -> Self {
        Self {
            config,
            rows: Vec::new(),
            averages: Vec::new(),
        }
    }

    /// Appends one stage's rows, filling forgetting deltas and the stage average.
    pub fn push_stage(&mut self, trained_through: usize, mut rows: Vec<EvalRow>) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::invalid("a stage needs at least one evaluation"));
        }
        for r in &mut rows {
            r.trained_through = trained_through;
            let reference = self
                .rows
                .iter()
                .find(|p| p.task == r.task && p.trained_through == r.task)
                .map(|p| (p.psnr_db, p.ssim))
                .unwrap_or((r.psnr_db, r.ssim));
            r.forgetting_psnr_db = reference.0 - r.psnr_db;
            r.forgetting_ssim = reference.1 - r.ssim;
        }
        let n = rows.len() as f64;
        self.averages.push(StageAverage {
            trained_through,
            psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        });
        self.rows.extend(rows);
        Ok(())
    }

    pub fn row(&self, trained_through: usize, task: usize) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.trained_through == trained_through && r.task == task)
    }

    pub fn last_stage(&self) -> Option<usize> {
        self.rows.iter().map(|r| r.trained_through).max()
    }

    /// Rows of the final stage, ordered by task.
    pub fn final_rows(&self) -> Vec<&EvalRow> {
        let Some(last) = self.last_stage() else {
            return Vec::new();
        };
        let mut rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.trained_through == last).collect();
        rows.sort_by_key(|r| r.task);
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.trained_through,
                r.task,
                r.kind,
                r.psnr_db,
                r.ssim,
                r.forgetting_psnr_db,
                r.forgetting_ssim
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Method-comparison table over the final stage of each report: an Average column
/// followed by one column per task, PSNR and SSIM each.
pub fn comparison_table(entries: &[(&str, &TaskReport)]) -> Result<String> {
    let tasks = entries
        .iter()
        .map(|(_, r)| r.final_rows().len())
        .max()
        .ok_or_else(|| Error::invalid("no reports to tabulate"))?;
    let mut out = String::from("method,average_psnr_db,average_ssim");
    for t in 1..=tasks {
        let _ = write!(out, ",task{t}_psnr_db,task{t}_ssim");
    }
    out.push('\n');
    for (name, report) in entries {
        let rows = report.final_rows();
        if rows.is_empty() {
            return Err(Error::invalid(format!("report `{name}` has no evaluations")));
        }
        let n = rows.len() as f64;
        let avg_p = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let avg_s = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        let _ = write!(out, "{name},{avg_p:.2},{avg_s:.4}");
        for t in 1..=tasks {
            match rows.iter().find(|r| r.task == t) {
                Some(r) => {
                    let _ = write!(out, ",{:.2},{:.4}", r.psnr_db, r.ssim);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Per-task layout of one report: a row per stage, columns Average then Task 1..n.
pub fn stage_table(report: &TaskReport) -> String {
    let tasks = report.rows.iter().map(|r| r.task).max().unwrap_or(0);
    let mut out = String::from("trained_through,average_psnr_db,average_ssim");
    for t in 1..=tasks {
        let _ = write!(out, ",task{t}_psnr_db,task{t}_ssim");
    }
    out.push('\n');
    for avg in &report.averages {
        let _ = write!(out, "{},{:.2},{:.4}", avg.trained_through, avg.psnr_db, avg.ssim);
        for t in 1..=tasks {
            match report.row(avg.trained_through, t) {
                Some(r) => {
                    let _ = write!(out, ",{:.2},{:.4}", r.psnr_db, r.ssim);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}
