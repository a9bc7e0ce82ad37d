//! Accuracy grid and the forward/backward forgetting metrics.

use crate::error::{Error, Result};

/// Session-by-task accuracy grid. `get(s, j)` is the accuracy on task `j`
/// measured after finishing session `s`.
#[derive(Clone, Debug)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            cells: vec![None; tasks * tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, session: usize, task: usize, accuracy: f64) -> Result<()> {
        if session >= self.tasks || task >= self.tasks {
            return Err(Error::Index(format!(
                "cell ({session}, {task}) outside {0}x{0} grid",
                self.tasks
            )));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Argument(format!(
                "accuracy {accuracy} outside [0, 1]"
            )));
        }
        self.cells[session * self.tasks + task] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, session: usize, task: usize) -> Option<f64> {
        self.cells[session * self.tasks + task]
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|c| c.is_some())
    }

    /// Build a complete matrix from row-major values.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let mut m = AccuracyMatrix::new(t);
        for (s, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Dimension(format!(
                    "row {s} has {} entries, expected {t}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(s, j, v)?;
            }
        }
        Ok(m)
    }
}

/// Derived metric columns plus run telemetry.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub task_names: Vec<String>,
    /// Per-task mean accuracy before the task was learned; the first task
    /// has no such sessions and stays blank.
    pub transfer: Vec<Option<f64>>,
    pub transfer_mean: Option<f64>,
    /// Per-task mean accuracy over all sessions.
    pub average: Vec<f64>,
    pub average_mean: f64,
    /// Final-session row.
    pub last: Vec<f64>,
    pub last_mean: f64,
    /// Frozen-backbone accuracy measured before any session.
    pub zero_shot: Vec<f64>,
    pub zero_shot_mean: f64,
    /// Mean open prompt gates per instance, final session.
    pub mean_open_layers: Vec<f64>,
}

/// Metric definitions over the completed grid:
/// `transfer[j] = mean over sessions s < j`, `last[j] = final row`,
/// `average[j] = mean over all sessions`. Headline numbers average the
/// defined columns.
pub fn compute_metrics(
    matrix: &AccuracyMatrix,
    zero_shot: &[f64],
    task_names: &[String],
    mean_open_layers: &[f64],
) -> Result<MetricsReport> {
    let t = matrix.tasks();
    if !matrix.is_complete() {
        return Err(Error::State("accuracy matrix has unfilled cells".into()));
    }
    if zero_shot.len() != t || task_names.len() != t || mean_open_layers.len() != t {
        return Err(Error::Dimension(format!(
            "metrics inputs must all have {t} tasks"
        )));
    }
    let cell = |s: usize, j: usize| matrix.get(s, j).expect("matrix is complete");

    let mut transfer = Vec::with_capacity(t);
    for j in 0..t {
        if j == 0 {
            transfer.push(None);
        } else {
            let sum: f64 = (0..j).map(|s| cell(s, j)).sum();
            transfer.push(Some(sum / j as f64));
        }
    }
    let defined: Vec<f64> = transfer.iter().flatten().copied().collect();
    let transfer_mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    let average: Vec<f64> = (0..t)
        .map(|j| (0..t).map(|s| cell(s, j)).sum::<f64>() / t as f64)
        .collect();
    let last: Vec<f64> = (0..t).map(|j| cell(t - 1, j)).collect();

    Ok(MetricsReport {
        task_names: task_names.to_vec(),
        transfer,
        transfer_mean,
        average_mean: average.iter().sum::<f64>() / t as f64,
        average,
        last_mean: last.iter().sum::<f64>() / t as f64,
        last,
        zero_shot_mean: zero_shot.iter().sum::<f64>() / t as f64,
        zero_shot: zero_shot.to_vec(),
        mean_open_layers: mean_open_layers.to_vec(),
    })
}
