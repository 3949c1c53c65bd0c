//! Metrics and report files.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adaptation::{self, AdaptConfig, AdaptMode};
use crate::error::{Error, Result};
use crate::learners::{EvalMode, TaskScore};
use crate::memory::EpisodicMemory;
use crate::models::{KeyNetwork, PredictorParams};
use crate::seeds;
use crate::taskgen::TaskId;

/// Identifies the binary that wrote a report.
pub const BUILD_ID: &str = concat!("memloom-", env!("CARGO_PKG_VERSION"));

/// Unweighted mean of per-task accuracies.
pub fn macro_average(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Empty("per-task scores"));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Accuracy on the final task of `ordering`.
pub fn last_task_score(per_task: &[TaskScore], ordering: &[TaskId]) -> Result<f64> {
    let last = ordering.last().ok_or(Error::Empty("ordering"))?;
    per_task
        .iter()
        .find(|s| &s.task == last)
        .map(|s| s.accuracy)
        .ok_or_else(|| Error::UnknownTask(last.to_string()))
}

/// Scores of the first task at stages `0..=N`, one per checkpoint.
pub fn forgetting_curve<S>(checkpoints: &[S], mut score_first_task: impl FnMut(&S) -> Result<f64>) -> Result<Vec<f64>> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoint list"));
    }
    checkpoints.iter().map(&mut score_first_task).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborMatrix {
    pub tasks: Vec<TaskId>,
    /// `rows[i][j]`: share of neighbours from task `j` among those retrieved for task-`i` queries.
    pub rows: Vec<Vec<f64>>,
    /// Neighbours retrieved per query task; a zero marks an unpopulated row.
    pub counts: Vec<usize>,
}

impl NeighborMatrix {
    /// Mean diagonal over populated rows.
    pub fn mean_diagonal(&self) -> Option<f64> {
        let diag: Vec<f64> = (0..self.tasks.len())
            .filter(|&i| self.counts[i] > 0)
            .map(|i| self.rows[i][i])
            .collect();
        if diag.is_empty() {
            None
        } else {
            Some(diag.iter().sum::<f64>() / diag.len() as f64)
        }
    }
}

/// Row-normalized provenance counts over `(query task, neighbour task)` pairs.
/// Pairs naming tasks outside `tasks` are ignored.
pub fn neighbor_source_matrix(log: &[(TaskId, TaskId)], tasks: &[TaskId]) -> NeighborMatrix {
    let n = tasks.len();
    let pos = |t: &TaskId| tasks.iter().position(|u| u == t);
    let mut counts = vec![vec![0usize; n]; n];
    for (q, s) in log {
        if let (Some(i), Some(j)) = (pos(q), pos(s)) {
            counts[i][j] += 1;
        }
    }
    let totals: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let rows = counts
        .iter()
        .zip(&totals)
        .map(|(r, &t)| {
            if t == 0 {
                vec![0.0; n]
            } else {
                r.iter().map(|&c| c as f64 / t as f64).collect()
            }
        })
        .collect();
    for (t, &c) in tasks.iter().zip(&totals) {
        if c == 0 {
            tracing::debug!(task = %t, "neighbour matrix row has no queries");
        }
    }
    NeighborMatrix {
        tasks: tasks.to_vec(),
        rows,
        counts: totals,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub test_examples: usize,
    pub per_example_seconds: f64,
    pub coarse_seconds: f64,
    pub speedup: f64,
}

/// Wall-clock of adapting per example versus once for the whole set.
pub fn timing_compare<X: AsRef<[f64]>>(
    theta: &PredictorParams,
    memory: &EpisodicMemory,
    keynet: &KeyNetwork,
    xs: &[X],
    per_example: &AdaptConfig,
    coarse: &AdaptConfig,
    seed: u64,
) -> Result<TimingRecord> {
    let mut per_example = per_example.clone();
    per_example.mode = AdaptMode::PerExample;
    let mut coarse = coarse.clone();
    coarse.mode = AdaptMode::Coarse;

    let started = Instant::now();
    adaptation::predict_with_adaptation(theta, memory, keynet, xs, &per_example, &mut seeds::rng(seed, "adaptation"))?;
    let per_example_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    adaptation::predict_with_adaptation(theta, memory, keynet, xs, &coarse, &mut seeds::rng(seed, "adaptation"))?;
    let coarse_seconds = started.elapsed().as_secs_f64();
    Ok(TimingRecord {
        test_examples: xs.len(),
        per_example_seconds,
        coarse_seconds,
        speedup: per_example_seconds / coarse_seconds.max(1e-12),
    })
}

/// Everything one evaluated run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub build: String,
    pub config: serde_json::Value,
    pub variant: String,
    pub policy: String,
    pub memory_rate: f64,
    pub eval_mode: EvalMode,
    pub ordering: String,
    pub seed: u64,
    pub per_task: Vec<TaskScore>,
    pub macro_average: f64,
    pub last_task_score: f64,
    /// Accuracy on the first task of the ordering after the whole stream.
    pub first_task_final: f64,
    pub memory_size: usize,
    pub forgetting_curve: Option<Vec<f64>>,
    pub neighbor_matrix: Option<NeighborMatrix>,
    /// Kept out of `metrics.json`; wall-clock is not reproducible.
    #[serde(skip)]
    pub timing: Option<TimingRecord>,
}

fn csv_header(report: &EvalReport) -> Result<String> {
    Ok(format!("# build={} config={}\n", report.build, serde_json::to_string(&report.config)?))
}

/// Writes `metrics.json`, `metrics.csv` and whichever optional analyses the
/// report carries.
pub fn write_reports(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?;

    let mut csv = csv_header(report)?;
    csv.push_str("variant,policy,ordering,seed,task,accuracy,count\n");
    for s in &report.per_task {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            report.variant, report.policy, report.ordering, report.seed, s.task, s.accuracy, s.count
        ));
    }
    fs::write(dir.join("metrics.csv"), csv)?;

    if let Some(m) = &report.neighbor_matrix {
        let mut csv = csv_header(report)?;
        csv.push_str("query_task");
        for t in &m.tasks {
            csv.push_str(&format!(",{t}"));
        }
        csv.push_str(",count\n");
        for (i, row) in m.rows.iter().enumerate() {
            csv.push_str(m.tasks[i].as_str());
            for v in row {
                csv.push_str(&format!(",{v}"));
            }
            csv.push_str(&format!(",{}\n", m.counts[i]));
        }
        fs::write(dir.join("neighbor_matrix.csv"), csv)?;
    }
    if let Some(curve) = &report.forgetting_curve {
        let mut csv = csv_header(report)?;
        csv.push_str("stage,first_task_accuracy\n");
        for (i, v) in curve.iter().enumerate() {
            csv.push_str(&format!("{i},{v}\n"));
        }
        fs::write(dir.join("forgetting_curve.csv"), csv)?;
    }
    if let Some(t) = &report.timing {
        let doc = serde_json::json!({
            "build": report.build,
            "config": report.config,
            "timing": t,
        });
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    Ok(())
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
