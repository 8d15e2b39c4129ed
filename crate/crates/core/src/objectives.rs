//! Training objectives and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::connectome::ConnectivityMatrix;
use crate::diffcore::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub sf: f64,
    pub task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sf: 0.3, task: 0.7 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.sf >= 0.0 && self.task >= 0.0) || !self.sf.is_finite() || !self.task.is_finite() {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if self.sf == 0.0 && self.task == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Mean squared error over a batch.
pub fn task_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions, targets, 1)?;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64)
}

fn check_gram_shape(x: &Tensor2, n: usize, len: usize) -> Result<()> {
    if len != n * n {
        return Err(Error::Validation(format!("target has {len} entries, expected {n}x{n}")));
    }
    if x.rows != n {
        return Err(Error::Validation(format!("embeddings have {} rows, target is {n}x{n}", x.rows)));
    }
    Ok(())
}

/// `‖X Xᵀ − W‖²_F / η²` for any square `W`.
pub fn gram_loss(x: &Tensor2, w: &Tensor2) -> Result<f64> {
    gram_loss_slice(x, w.rows, &w.values)
}

/// Gradient of [`gram_loss`] with respect to `X`: `2 (D + Dᵀ) X / η²` where
/// `D = X Xᵀ − W`.
pub fn gram_loss_grad(x: &Tensor2, w: &Tensor2) -> Result<Tensor2> {
    gram_loss_grad_slice(x, w.rows, &w.values)
}

fn gram_loss_slice(x: &Tensor2, n: usize, w: &[f64]) -> Result<f64> {
    check_gram_shape(x, n, w.len())?;
    let gram = x.matmul_nt(x);
    let sq: f64 = gram.values.iter().zip(w).map(|(g, w)| (g - w) * (g - w)).sum();
    Ok(sq / (n * n) as f64)
}

fn gram_loss_grad_slice(x: &Tensor2, n: usize, w: &[f64]) -> Result<Tensor2> {
    check_gram_shape(x, n, w.len())?;
    let mut d = x.matmul_nt(x);
    for (g, w) in d.values.iter_mut().zip(w) {
        *g -= w;
    }
    let mut sym = d.transpose();
    sym.add_assign(&d);
    let mut g = sym.matmul(x);
    let scale = 2.0 / (n * n) as f64;
    for v in &mut g.values {
        *v *= scale;
    }
    Ok(g)
}

/// Structure-function consistency: [`gram_loss`] against the dense FNC
/// matrix, diagonal included.
pub fn sf_consistency_loss(x_final: &Tensor2, fnc: &ConnectivityMatrix) -> Result<f64> {
    gram_loss_slice(x_final, fnc.size(), fnc.as_slice())
}

pub fn sf_consistency_grad(x_final: &Tensor2, fnc: &ConnectivityMatrix) -> Result<Tensor2> {
    gram_loss_grad_slice(x_final, fnc.size(), fnc.as_slice())
}

pub fn joint_loss(task: f64, sf: f64, weights: LossWeights) -> f64 {
    weights.sf * sf + weights.task * task
}

// ---------------------------------------------------------------------------

fn check_lengths(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "length mismatch: {} predictions, {} targets",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min {
        return Err(Error::Validation(format!("need at least {min} values, got {}", a.len())));
    }
    Ok(())
}

/// Pearson correlation; `None` when either side has zero variance or fewer
/// than two values.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    // the mean of equal values can round away from them, so test equality directly
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if constant(x) || constant(y) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// `None` when undefined (constant predictions or targets).
    pub correlation: Option<f64>,
}

pub fn evaluate(predictions: &[f64], targets: &[f64]) -> Result<Metrics> {
    check_lengths(predictions, targets, 1)?;
    let n = predictions.len() as f64;
    let mse = task_loss(predictions, targets)?;
    let mae = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    Ok(Metrics {
        mse,
        mae,
        correlation: pearson(predictions, targets),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation; `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mse: MeanStd,
    pub mae: MeanStd,
    /// Over the folds where correlation is defined.
    pub correlation: Option<MeanStd>,
    pub undefined_correlations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub target: String,
    pub seed: u64,
    pub config_hash: String,
    pub folds: Vec<Metrics>,
    pub aggregate: AggregateMetrics,
}

pub fn aggregate(folds: &[Metrics]) -> Result<AggregateMetrics> {
    if folds.is_empty() {
        return Err(Error::Validation("no folds to aggregate".into()));
    }
    let mse: Vec<f64> = folds.iter().map(|m| m.mse).collect();
    let mae: Vec<f64> = folds.iter().map(|m| m.mae).collect();
    let corr: Vec<f64> = folds.iter().filter_map(|m| m.correlation).collect();
    Ok(AggregateMetrics {
        mse: MeanStd::of(&mse).expect("nonempty"),
        mae: MeanStd::of(&mae).expect("nonempty"),
        correlation: MeanStd::of(&corr),
        undefined_correlations: folds.len() - corr.len(),
    })
}

fn fmt_ms(m: &MeanStd) -> String {
    format!("{:.4}±{:.4}", m.mean, m.std)
}

/// Aligned plain-text table, one row per report, MSE / MAE / correlation as
/// mean ± std.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let header = ["Method", "Target", "MSE", "MAE", "Correlation"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.target.clone(),
                fmt_ms(&r.aggregate.mse),
                fmt_ms(&r.aggregate.mae),
                r.aggregate.correlation.as_ref().map_or("undefined".to_string(), fmt_ms),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let sep = format!(
        "|{}|\n",
        widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
    );
    let mut out = line(header.to_vec());
    out.push_str(&sep);
    for row in &rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}
