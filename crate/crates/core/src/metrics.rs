//! Train-test accuracy matrix and the scalar continual-learning metrics.
//!
//! Row `i` of the matrix holds accuracies (percent) on every task's evaluation
//! set after training session `i`. Indices in this API are 0-based.

use serde::Serialize;
use thiserror::Error;

pub const ILM_DEFINITION: &str =
    "mean of A[i][j] over 1 <= j <= i <= T (lower triangle including diagonal): 2/(T(T+1)) * sum";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("row {got} recorded out of order; next row is {expected}")]
    OutOfOrderRow { expected: usize, got: usize },
    #[error("accuracy {value} outside [0, 100]")]
    RangeViolation { value: f64 },
    #[error("row has {got} entries, matrix has {expected} tasks")]
    RowLength { expected: usize, got: usize },
    #[error("matrix has {filled} of {tasks} rows filled")]
    IncompleteMatrix { filled: usize, tasks: usize },
    #[error("backward transfer is undefined for a single task")]
    UndefinedForSingleTask,
    #[error("malformed matrix csv: {0}")]
    MalformedCsv(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    filled: usize,
    values: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            filled: 0,
            values: vec![0.0; tasks * tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_complete(&self) -> bool {
        self.filled == self.tasks
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.tasks + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.tasks..(i + 1) * self.tasks]
    }

    /// Stores row `i`, which must be the next unfilled row.
    pub fn record_row(&mut self, i: usize, accuracies: &[f64]) -> Result<()> {
        if i != self.filled || i >= self.tasks {
            return Err(MetricsError::OutOfOrderRow {
                expected: self.filled,
                got: i,
            });
        }
        if accuracies.len() != self.tasks {
            return Err(MetricsError::RowLength {
                expected: self.tasks,
                got: accuracies.len(),
            });
        }
        if let Some(&value) = accuracies.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(MetricsError::RangeViolation { value });
        }
        self.values[i * self.tasks..(i + 1) * self.tasks].copy_from_slice(accuracies);
        self.filled += 1;
        Ok(())
    }

    fn require_complete(&self) -> Result<()> {
        if !self.is_complete() || self.tasks == 0 {
            return Err(MetricsError::IncompleteMatrix {
                filled: self.filled,
                tasks: self.tasks,
            });
        }
        Ok(())
    }

    /// Mean of the last row.
    pub fn avg_accuracy(&self) -> Result<f64> {
        self.require_complete()?;
        let last = self.row(self.tasks - 1);
        Ok(last.iter().sum::<f64>() / self.tasks as f64)
    }

    /// `(1/(T−1)) Σ_{i<T} (A[T][i] − A[i][i])`; negative means forgetting.
    pub fn bwt(&self) -> Result<f64> {
        self.require_complete()?;
        let t = self.tasks;
        if t < 2 {
            return Err(MetricsError::UndefinedForSingleTask);
        }
        let sum: f64 = (0..t - 1).map(|i| self.get(t - 1, i) - self.get(i, i)).sum();
        Ok(sum / (t - 1) as f64)
    }

    /// Lower-triangle-inclusive mean, see [`ILM_DEFINITION`].
    pub fn ilm(&self) -> Result<f64> {
        self.require_complete()?;
        let t = self.tasks;
        let sum: f64 = (0..t).flat_map(|i| (0..=i).map(move |j| (i, j))).map(|(i, j)| self.get(i, j)).sum();
        Ok(2.0 * sum / (t * (t + 1)) as f64)
    }

    /// Mean accuracy over tasks seen so far after each filled session.
    pub fn timeline(&self) -> Vec<f64> {
        (0..self.filled)
            .map(|i| self.row(i)[..=i].iter().sum::<f64>() / (i + 1) as f64)
            .collect()
    }

    /// Header-less CSV, one line per filled row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.filled {
            let line: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| MetricsError::MalformedCsv(format!("{v:?}: {e}")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let t = rows.len();
        if t == 0 {
            return Err(MetricsError::MalformedCsv("no rows".into()));
        }
        let mut m = Self::new(t);
        for (i, r) in rows.iter().enumerate() {
            m.record_row(i, r)?;
        }
        Ok(m)
    }
}

/// The `metrics.json` payload. `bwt` and `ilm` are `null` when undefined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub avg_accuracy: f64,
    pub bwt: Option<f64>,
    pub ilm: Option<f64>,
    pub ilm_definition: &'static str,
    pub method: String,
    pub seed: u64,
    #[serde(rename = "T")]
    pub tasks: usize,
}

impl MetricsSummary {
    pub fn from_matrix(m: &AccuracyMatrix, method: &str, seed: u64) -> Result<Self> {
        let bwt = match m.bwt() {
            Ok(v) => Some(v),
            Err(MetricsError::UndefinedForSingleTask) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            avg_accuracy: m.avg_accuracy()?,
            bwt,
            ilm: Some(m.ilm()?),
            ilm_definition: ILM_DEFINITION,
            method: method.to_string(),
            seed,
            tasks: m.tasks(),
        })
    }
}
