use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default number of equal-width confidence bins.
pub const ECE_BINS: usize = 15;

/// Neumaier-compensated sum, so that e.g. ten copies of 0.8 add up to exactly 8.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Expected calibration error over equal-width bins on (0, 1].
///
/// A confidence `c` falls in bin `ceil(c · bins) − 1`; zero joins the first bin.
/// Each bin contributes `(n_b/N)·|acc_b − conf_b|`, evaluated as
/// `|hits_b − Σ conf_b| / N`.
pub fn ece(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::Data("ECE of an empty prediction set".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::Shape(format!("{} confidences for {} outcomes", confidences.len(), correct.len())));
    }
    if num_bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); num_bins];
    let mut hits = vec![0usize; num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Data(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * num_bins as f64).ceil() as usize).clamp(1, num_bins) - 1;
        members[b].push(c);
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    Ok(compensated_sum(
        members
            .iter()
            .zip(&hits)
            .filter(|(m, _)| !m.is_empty())
            .map(|(m, &h)| (h as f64 - compensated_sum(m.iter().copied())).abs() / n),
    ))
}

/// Fraction of rows whose arg-max matches the label.
pub fn batch_accuracy(logits: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let (b, k) = logits.dims2()?;
    if b != labels.len() || b == 0 {
        return Err(Error::Shape(format!("{b} predictions for {} labels", labels.len())));
    }
    let hits = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / b as f64)
}

/// Index of the first maximum.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    MetaTrain,
    Train,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::MetaTrain => "meta_train",
            Phase::Train => "train",
            Phase::Eval => "eval",
        }
    }
}

/// One line of `metrics.csv`; absent values are written as empty fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub task_id: usize,
    pub phase: Phase,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "step,task_id,phase,train_loss,test_loss,accuracy,lr,beta";

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.task_id,
                r.phase.name(),
                opt(r.train_loss),
                opt(r.test_loss),
                opt(r.accuracy),
                r.lr,
                r.beta
            );
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub phi_count: usize,
    /// Hex digest of the effective configuration without seed and paths.
    pub config_hash: String,
    pub seed: u64,
    /// The effective configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Summary {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
