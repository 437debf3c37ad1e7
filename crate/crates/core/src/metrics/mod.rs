//! Class-incremental evaluation, the accuracy matrix, and run reports.
//!
//! Episode indices in this module are 1-based, as in `R[t][i]`: accuracy on
//! episode `i`'s test split after training through episode `t`.

mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tape;
use crate::data::{Scenario, Split};
use crate::model::{Mode, Model, ModelError};

pub use report::{
    compare_reports, emit_report, load_report, matrix_csv, render_curves, summary_csv, BufferStats,
    CodebookStats, EpochLoss, RunReport, SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse {
        path: std::path::PathBuf,
        detail: String,
    },
    #[error("{path}: report schema version {found}, expected {expected}")]
    SchemaMismatch {
        path: std::path::PathBuf,
        found: u64,
        expected: u64,
    },
    #[error("no reports to compare")]
    NoReports,
    #[error("episode {0} has no test samples")]
    MissingTestSplit(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Percent correct.
    pub accuracy: f64,
    pub n: usize,
}

/// Lower-triangular `T x T` accuracy matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Cell>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Builds a matrix from complete rows; row `t` must hold `t` cells.
    pub fn from_rows(rows: Vec<Vec<Cell>>) -> Option<Self> {
        let ok = rows.iter().enumerate().all(|(t, r)| r.len() == t + 1);
        ok.then_some(AccuracyMatrix { rows })
    }

    /// Appends row `T + 1`.
    pub fn push_row(&mut self, row: Vec<Cell>) {
        assert_eq!(
            row.len(),
            self.rows.len() + 1,
            "row {} needs {} cells",
            self.rows.len() + 1,
            self.rows.len() + 1
        );
        self.rows.push(row);
    }

    pub fn episodes(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.rows[t - 1][i - 1].accuracy
    }

    pub fn cell(&self, t: usize, i: usize) -> Cell {
        self.rows[t - 1][i - 1]
    }

    pub fn row(&self, t: usize) -> &[Cell] {
        &self.rows[t - 1]
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        AccuracyMatrix::new()
    }
}

/// `A[t]`: unweighted mean of `R[t][1..=t]`.
pub fn average_accuracy(r: &AccuracyMatrix, t: usize) -> f64 {
    let row = r.row(t);
    row.iter().map(|c| c.accuracy).sum::<f64>() / row.len() as f64
}

/// Sample-weighted accuracy over row `t`.
pub fn pooled_accuracy(r: &AccuracyMatrix, t: usize) -> f64 {
    let row = r.row(t);
    let n: usize = row.iter().map(|c| c.n).sum();
    if n == 0 {
        return 0.0;
    }
    row.iter().map(|c| c.accuracy * c.n as f64).sum::<f64>() / n as f64
}

/// `(1 / (T-1)) * sum_{i<T} (R[T][i] - R[i][i])`; `None` when `T < 2`.
pub fn backward_transfer(r: &AccuracyMatrix) -> Option<f64> {
    let t = r.episodes();
    if t < 2 {
        return None;
    }
    let s: f64 = (1..t).map(|i| r.get(t, i) - r.get(i, i)).sum();
    Some(s / (t - 1) as f64)
}

/// Predicted global class of one logit row: highest logit, lowest class id
/// among ties.
pub fn predict(logits: &[f32], classes: &[u32]) -> u32 {
    let mut best = (f32::NEG_INFINITY, u32::MAX);
    for (&v, &c) in logits.iter().zip(classes) {
        if v > best.0 || (v == best.0 && c < best.1) {
            best = (v, c);
        }
    }
    best.1
}

pub const EVAL_BATCH: usize = 256;

/// Accuracy of `model` on episode `i`'s test split (`i` is 1-based), with
/// predictions ranging over every class in the model's head.
pub fn evaluate_episode(
    model: &Model,
    scenario: &Scenario,
    i: usize,
) -> Result<Cell, MetricsError> {
    let samples = scenario.samples(i - 1, Split::Test);
    if samples.is_empty() {
        return Err(MetricsError::MissingTestSplit(i));
    }
    let classes = model.head_classes();
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = scenario.batch(chunk);
        let mut tape = Tape::no_grad();
        let bound = model.bind(&mut tape);
        let x = tape.constant(batch.images);
        let logits = model.forward_from(&mut tape, &bound, x, 0, Mode::Eval)?;
        let out = tape.value(logits);
        let k = classes.len();
        for (row, &label) in out.data().chunks_exact(k).zip(&batch.labels) {
            if predict(row, classes) as usize == label {
                correct += 1;
            }
        }
    }
    Ok(Cell {
        accuracy: 100.0 * correct as f64 / samples.len() as f64,
        n: samples.len(),
    })
}

/// Row `R[t][1..=t]`.
pub fn evaluate(model: &Model, scenario: &Scenario, t: usize) -> Result<Vec<Cell>, MetricsError> {
    (1..=t)
        .map(|i| evaluate_episode(model, scenario, i))
        .collect()
}
