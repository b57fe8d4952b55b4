//! Reconstruction quality: PSNR, matching against ground truth, and the
//! per-client report rows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::matching::{linear_sum_assignment, similarity_matrix};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Success threshold for single-channel images.
pub const GRAY_THRESHOLD: f64 = 20.0;
/// Success threshold for color images.
pub const COLOR_THRESHOLD: f64 = 19.0;

/// `10·log10(1 / MSE)` for pixels in `[0, 1]`, capped at [`PSNR_CAP`].
///
/// Panics if the lengths differ; use [`try_psnr`] for checked input.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    try_psnr(a, b).expect("psnr operands must have equal length")
}

pub fn try_psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Config(format!("psnr of {} and {} pixels", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (-10.0 * mse.log10()).min(PSNR_CAP) })
}

/// Default threshold for a channel count.
pub fn default_threshold(channels: usize) -> f64 {
    if channels == 1 {
        GRAY_THRESHOLD
    } else {
        COLOR_THRESHOLD
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// PSNR of ground-truth image `i` against its matched reconstruction.
    pub psnr: Vec<f64>,
    /// Reconstruction matched to ground-truth image `i`.
    pub matched: Vec<usize>,
    pub threshold: f64,
    pub rec_percent: f64,
    pub mean_psnr: f64,
}

/// Matches reconstructions to ground truth maximizing total PSNR, then counts
/// images whose PSNR exceeds `threshold`.
pub fn evaluate(recon: &Tensor, truth: &Tensor, threshold: f64) -> Result<EvalReport> {
    let m = similarity_matrix(truth, recon)?;
    let a = linear_sum_assignment(&m, true)?;
    let psnr: Vec<f64> = a.perm.iter().enumerate().map(|(i, &j)| m[i][j]).collect();
    let n = psnr.len() as f64;
    let hits = psnr.iter().filter(|&&p| p > threshold).count() as f64;
    Ok(EvalReport {
        rec_percent: 100.0 * hits / n,
        mean_psnr: psnr.iter().sum::<f64>() / n,
        psnr,
        matched: a.perm,
        threshold,
    })
}

/// Mislabeled examples implied by two count vectors, `|λ̃ − λ|₁ / 2`.
pub fn label_error(estimate: &[usize], truth: &[usize]) -> f64 {
    estimate.iter().zip(truth).map(|(&a, &b)| a.abs_diff(b)).sum::<usize>() as f64 / 2.0
}

/// One row of the report CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub client_id: String,
    pub mode: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub examples: usize,
    pub steps: usize,
    pub rec_percent: f64,
    pub mean_psnr: f64,
    pub label_err: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "client_id,mode,E,m,N,U,rec_percent,mean_psnr,label_err,seed";

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.1},{}",
            self.client_id,
            self.mode,
            self.epochs,
            self.batch_size,
            self.examples,
            self.steps,
            self.rec_percent,
            self.mean_psnr,
            self.label_err,
            self.seed
        )
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
