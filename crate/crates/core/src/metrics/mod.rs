//! Evaluation metrics over log importance weights.
//!
//! ESS follows the usual self-normalized convention,
//! `100 · (Σw)² / (n · Σw²)` percent, computed entirely in log space.

mod report;

pub use report::{eval_points, evaluate, write_eval_csv, EvalConfig, EvalReport, EVAL_CSV_HEADER};

use serde::Serialize;

use crate::autodiff::{logsumexp, Tensor};
use crate::error::{Error, Result};
use crate::flow::FlowModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Flow,
    Ais,
}

impl WeightSource {
    pub fn label(self) -> &'static str {
        match self {
            WeightSource::Flow => "flow",
            WeightSource::Ais => "ais",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EssReport {
    /// In `[100/n, 100]`.
    pub ess_percent: f64,
    pub n_samples: usize,
    pub source: WeightSource,
}

/// Effective sample size as a percentage of `log_w.len()`.
pub fn ess(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() {
        return Err(Error::InvalidArgument("ess needs at least one weight".into()));
    }
    let lse = logsumexp(log_w);
    if !lse.is_finite() {
        return Err(Error::DegenerateBatch);
    }
    let doubled: Vec<f64> = log_w.iter().map(|v| 2.0 * v).collect();
    let value = 100.0 * (2.0 * lse - logsumexp(&doubled) - (log_w.len() as f64).ln()).exp();
    Ok(value.min(100.0))
}

pub fn ess_report(log_w: &[f64], source: WeightSource) -> Result<EssReport> {
    Ok(EssReport {
        ess_percent: ess(log_w)?,
        n_samples: log_w.len(),
        source,
    })
}

/// Normalized weights `softmax(log_w)`.
pub fn normalized_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(log_w);
    if !lse.is_finite() {
        return Err(Error::DegenerateBatch);
    }
    Ok(log_w.iter().map(|v| (v - lse).exp()).collect())
}

/// Self-normalized estimate `Σ softmax(log_w)ᵢ · values[i]`.
pub fn weighted_expectation(values: &[f64], log_w: &[f64]) -> Result<f64> {
    if values.len() != log_w.len() {
        return Err(Error::DimensionMismatch {
            expected: log_w.len(),
            got: values.len(),
        });
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateBatch);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (lw, v) in log_w.iter().zip(values) {
        let w = (lw - max).exp();
        num += w * v;
        den += w;
    }
    // a ratio of sums keeps constant functions exact
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimatorReport {
    pub bias_percent: f64,
    /// Non-negative.
    pub std_percent: f64,
    pub n_runs: usize,
    pub n_samples_per_run: usize,
    /// One estimate per run, in run order.
    pub estimates: Vec<f64>,
}

/// Repeats an estimator `n_runs` times and summarizes it against `truth`.
///
/// `run(r)` returns the estimate of run `r`. Bias and std are percentages of
/// `|truth|`; std uses the `n_runs - 1` denominator.
pub fn bias_std_study(
    truth: f64,
    n_runs: usize,
    n_samples_per_run: usize,
    mut run: impl FnMut(usize) -> Result<f64>,
) -> Result<EstimatorReport> {
    if !(truth.is_finite() && truth != 0.0) {
        return Err(Error::InvalidArgument(format!("ground truth must be finite and nonzero, got {truth}")));
    }
    if n_runs == 0 {
        return Err(Error::InvalidArgument("bias study needs at least one run".into()));
    }
    let estimates = (0..n_runs).map(&mut run).collect::<Result<Vec<f64>>>()?;
    let mean = estimates.iter().sum::<f64>() / n_runs as f64;
    let var = if n_runs > 1 {
        estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n_runs - 1) as f64
    } else {
        0.0
    };
    Ok(EstimatorReport {
        bias_percent: 100.0 * (mean - truth).abs() / truth.abs(),
        std_percent: 100.0 * var.sqrt() / truth.abs(),
        n_runs,
        n_samples_per_run,
        estimates,
    })
}

/// Arithmetic mean of `log q` over `points`.
pub fn mean_log_q(flow: &FlowModel, points: &Tensor) -> Result<f64> {
    if points.rows() == 0 {
        return Err(Error::InvalidArgument("mean_log_q needs at least one point".into()));
    }
    let lq = flow.log_prob(points)?;
    Ok(lq.iter().sum::<f64>() / lq.len() as f64)
}

/// Fraction of `samples` inside the ball of `radius` around each mode.
pub fn mode_coverage(samples: &Tensor, modes: &[Vec<f64>], radius: f64) -> Vec<f64> {
    let n = samples.rows().max(1) as f64;
    let r2 = radius * radius;
    modes
        .iter()
        .map(|m| {
            let hits = samples
                .iter_rows()
                .filter(|x| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() <= r2)
                .count();
            hits as f64 / n
        })
        .collect()
}
