//! Evaluation bookkeeping for sequential-task runs: the lower-triangular
//! accuracy matrix, its average-accuracy and forgetting summaries, confusion
//! matrices, and the JSON/CSV report emitted per run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::nn::{classifier_forward, ClassifierModel, NnError};
use crate::rng::substream;
use crate::tensor::{Graph, TensorError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("row {got} entries, expected {expected} (row n must have n entries)")]
    BadRow { expected: usize, got: usize },
    #[error("accuracy {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("row {n} not available: {filled} rows filled")]
    RowUnavailable { n: usize, filled: usize },
    #[error("forgetting is undefined for n < 2")]
    UndefinedForgetting,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("label {label} outside the model's {num_classes}-class space")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("confusion matrices disagree: {0}")]
    ConfusionMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Accuracy `a[n][j]` of the model after task `n` on the test set of task
/// `j ≤ n`. Rows are appended as tasks complete; indices are 1-based to
/// match the usual continual-learning notation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> AccuracyMatrix {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Number of completed rows (tasks evaluated so far).
    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    /// Appends the accuracies measured after task `n = n_tasks() + 1`;
    /// `row[j-1]` is the accuracy on task j's test set.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(MetricsError::BadRow {
                expected,
                got: row.len(),
            });
        }
        for &v in &row {
            if !(0.0..=1.0).contains(&v) {
                return Err(MetricsError::OutOfRange(v));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// `a[n][j]`, 1-based.
    pub fn entry(&self, n: usize, j: usize) -> Result<f64> {
        if n == 0 || n > self.rows.len() {
            return Err(MetricsError::RowUnavailable {
                n,
                filled: self.rows.len(),
            });
        }
        if j == 0 || j > n {
            return Err(MetricsError::RowUnavailable { n: j, filled: n });
        }
        Ok(self.rows[n - 1][j - 1])
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Average accuracy after task `n`: the mean of row `n`.
pub fn average_accuracy(m: &AccuracyMatrix, n: usize) -> Result<f64> {
    if n == 0 || n > m.n_tasks() {
        return Err(MetricsError::RowUnavailable {
            n,
            filled: m.n_tasks(),
        });
    }
    let row = &m.rows()[n - 1];
    Ok(row.iter().sum::<f64>() / n as f64)
}

/// Average forgetting after task `n ≥ 2`: for each earlier task `j < n`, the
/// drop from the best accuracy it ever had (over models `i = j..n-1`) to its
/// accuracy now, averaged over `j`. Negative terms (backward transfer) are
/// kept as-is.
pub fn forgetting(m: &AccuracyMatrix, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(MetricsError::UndefinedForgetting);
    }
    if n > m.n_tasks() {
        return Err(MetricsError::RowUnavailable {
            n,
            filled: m.n_tasks(),
        });
    }
    let mut sum = 0.0;
    for j in 1..n {
        let mut best = f64::NEG_INFINITY;
        for i in j..n {
            best = best.max(m.entry(i, j)?);
        }
        sum += best - m.entry(n, j)?;
    }
    Ok(sum / (n - 1) as f64)
}

/// K×K prediction counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        debug_assert!(true_class < self.k && predicted < self.k);
        self.counts[true_class * self.k + predicted] += 1;
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.k + predicted]
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        self.counts[true_class * self.k..(true_class + 1) * self.k]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.count(i, i)).sum()
    }

    /// trace / total.
    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        self.trace() as f64 / self.total() as f64
    }

    /// Element-wise sum, e.g. to pool per-task evaluations over one model.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(MetricsError::ConfusionMismatch(format!(
                "{} vs {} classes",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Test-set accuracy and confusion matrix of a frozen classifier, evaluated
/// in eval mode (no dropout, running batch-norm statistics).
pub fn evaluate(model: &ClassifierModel, test: &LabeledDataset) -> Result<(f64, ConfusionMatrix)> {
    if test.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let k = model.num_classes();
    for &label in test.labels() {
        if label >= k {
            return Err(MetricsError::LabelOutOfRange {
                label,
                num_classes: k,
            });
        }
    }
    // Eval-mode forwards draw nothing from the stream; the rng argument only
    // exists to satisfy the forward signature.
    let mut rng = substream(0, "metrics/eval");
    let mut confusion = ConfusionMatrix::new(k);
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(256) {
        let (x, labels) = test.batch(chunk);
        let g = Graph::inference();
        let logits = classifier_forward(model, &g, &x, false, &mut rng)?;
        let data = logits.data();
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * k..(r + 1) * k];
            confusion.record(label, argmax_lowest(row));
        }
    }
    Ok((confusion.accuracy(), confusion))
}

/// One run's evaluation summary: the full matrix, its per-task summaries, and
/// the pooled confusion matrix measured after each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    /// `A_n` for n = 1..=N.
    pub average_accuracy: Vec<f64>,
    /// `F_n` for n = 2..=N (empty when N = 1).
    pub forgetting: Vec<f64>,
    pub confusions: Vec<ConfusionMatrix>,
}

impl MetricsReport {
    pub fn from_run(
        run_id: &str,
        method: &str,
        seed: u64,
        matrix: AccuracyMatrix,
        confusions: Vec<ConfusionMatrix>,
    ) -> Result<MetricsReport> {
        let n = matrix.n_tasks();
        let average_accuracy = (1..=n)
            .map(|i| average_accuracy(&matrix, i))
            .collect::<Result<Vec<f64>>>()?;
        let forgetting = (2..=n)
            .map(|i| forgetting(&matrix, i))
            .collect::<Result<Vec<f64>>>()?;
        Ok(MetricsReport {
            run_id: run_id.to_string(),
            method: method.to_string(),
            seed,
            matrix,
            average_accuracy,
            forgetting,
            confusions,
        })
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// Flat rows `run_id,method,seed,n,A_n,F_n` (F_1 left empty), one per
    /// task, without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for n in 1..=self.matrix.n_tasks() {
            let f = if n >= 2 {
                self.forgetting[n - 2].to_string()
            } else {
                String::new()
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.run_id,
                self.method,
                self.seed,
                n,
                self.average_accuracy[n - 1],
                f
            ));
        }
        out
    }
}

pub const CSV_HEADER: &str = "run_id,method,seed,n,avg_accuracy,forgetting\n";
