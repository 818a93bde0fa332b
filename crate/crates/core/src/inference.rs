//! Inference on generated samples: moments, confidence intervals for the
//! regression function, prediction intervals for a new response, studentized
//! statistics and replication metrics (CP, MSE, variance, squared bias).

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::stats::{normal_upper, t_quantile};

/// Mean and unbiased covariance (divisor `M - 1`) of `M` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub mean: Vec<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

impl SampleMoments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std_dev(&self, coordinate: usize) -> f64 {
        self.cov[[coordinate, coordinate]].max(0.0).sqrt()
    }
}

/// Moments of the rows of `samples` (`M x d_Y`).
pub fn sample_moments(samples: ArrayView2<f64>) -> Result<SampleMoments> {
    let (m, d) = samples.dim();
    if m < 2 {
        return Err(Error::Argument(format!("need at least 2 samples for a covariance, got {m}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("samples contain non-finite values".into()));
    }
    let mean: Vec<f64> = samples
        .columns()
        .into_iter()
        .map(|c| c.iter().copied().collect::<CompensatedSum>().total() / m as f64)
        .collect();
    let mut cov = Array2::zeros((d, d));
    for a in 0..d {
        for b in a..d {
            let s = samples
                .rows()
                .into_iter()
                .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                .collect::<CompensatedSum>()
                .total()
                / (m - 1) as f64;
            cov[[a, b]] = s;
            cov[[b, a]] = s;
        }
    }
    Ok(SampleMoments { mean, cov, count: m })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalKind {
    Confidence,
    Prediction,
}

impl IntervalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            IntervalKind::Confidence => "confidence",
            IntervalKind::Prediction => "prediction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
    /// Nominal coverage `1 - alpha`.
    pub level: f64,
    pub kind: IntervalKind,
    pub coordinate: usize,
    /// Set when the sample variance is zero and the interval collapses to a point.
    pub degenerate: bool,
}

impl IntervalEstimate {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

fn check_interval_args(moments: &SampleMoments, alpha: f64, coordinate: usize) -> Result<()> {
    if moments.count < 2 {
        return Err(Error::Argument("interval needs at least 2 samples".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if coordinate >= moments.dim() {
        return Err(Error::Argument(format!(
            "coordinate {coordinate} out of range for d_Y = {}",
            moments.dim()
        )));
    }
    let var = moments.cov[[coordinate, coordinate]];
    if !(var >= 0.0) {
        return Err(Error::Numerical(format!("negative variance {var}")));
    }
    Ok(())
}

fn interval(
    moments: &SampleMoments,
    alpha: f64,
    coordinate: usize,
    kind: IntervalKind,
    half_width: f64,
) -> IntervalEstimate {
    let center = moments.mean[coordinate];
    IntervalEstimate {
        center,
        lower: center - half_width,
        upper: center + half_width,
        level: 1.0 - alpha,
        kind,
        coordinate,
        degenerate: half_width == 0.0,
    }
}

/// `mean ± z_{alpha/2} S / sqrt(M)` for one coordinate.
pub fn confidence_interval(moments: &SampleMoments, alpha: f64, coordinate: usize) -> Result<IntervalEstimate> {
    check_interval_args(moments, alpha, coordinate)?;
    let z = normal_upper(alpha / 2.0)?;
    let half = z * moments.std_dev(coordinate) / (moments.count as f64).sqrt();
    Ok(interval(moments, alpha, coordinate, IntervalKind::Confidence, half))
}

/// `mean ± t_{alpha/2}(M - 1) S sqrt(1 + 1/M)` for one coordinate.
pub fn prediction_interval(moments: &SampleMoments, alpha: f64, coordinate: usize) -> Result<IntervalEstimate> {
    check_interval_args(moments, alpha, coordinate)?;
    let m = moments.count as f64;
    let t = t_quantile(1.0 - alpha / 2.0, m - 1.0)?;
    let half = t * moments.std_dev(coordinate) * (1.0 + 1.0 / m).sqrt();
    Ok(interval(moments, alpha, coordinate, IntervalKind::Prediction, half))
}

/// `sqrt(M) L^{-1} (mean - truth)` with `L` the lower Cholesky factor of the
/// sample covariance; for `d_Y = 1` this is `sqrt(M) (mean - truth) / S`.
pub fn studentized_stat(moments: &SampleMoments, truth: &[f64]) -> Result<Vec<f64>> {
    let d = moments.dim();
    if truth.len() != d {
        return Err(Error::Shape(format!("truth has {} coordinates, expected {d}", truth.len())));
    }
    let root_m = (moments.count as f64).sqrt();
    if d == 1 {
        let var = moments.cov[[0, 0]];
        if !(var > 0.0) {
            return Err(Error::Singular("sample variance is zero".into()));
        }
        return Ok(vec![root_m * (moments.mean[0] - truth[0]) / var.sqrt()]);
    }
    let cov = DMatrix::from_fn(d, d, |i, j| moments.cov[[i, j]]);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Singular("sample covariance is not positive definite".into()))?;
    let diff = DVector::from_iterator(d, moments.mean.iter().zip(truth).map(|(a, b)| a - b));
    let white = chol
        .l()
        .solve_lower_triangular(&diff)
        .ok_or_else(|| Error::Singular("Cholesky factor is singular".into()))?;
    Ok(white.iter().map(|v| v * root_m).collect())
}

/// Fraction of statistics inside the closed band `[-z_{alpha/2}, z_{alpha/2}]`.
pub fn coverage_probability(stats: &[f64], alpha: f64) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::Argument("coverage needs at least one statistic".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = normal_upper(alpha / 2.0)?;
    let inside = stats.iter().filter(|s| s.abs() <= z).count();
    Ok(inside as f64 / stats.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub mse: f64,
    pub variance: f64,
    pub bias2: f64,
}

/// MSE, variance (divisor `len`) and squared bias of `estimates` around `truth`.
pub fn mse_bias_variance(estimates: &[f64], truth: f64) -> Result<ErrorDecomposition> {
    if estimates.is_empty() {
        return Err(Error::Argument("metrics need at least one estimate".into()));
    }
    let n = estimates.len() as f64;
    let mean = estimates.iter().copied().collect::<CompensatedSum>().total() / n;
    let mse = estimates
        .iter()
        .map(|e| (e - truth) * (e - truth))
        .collect::<CompensatedSum>()
        .total()
        / n;
    let variance = estimates
        .iter()
        .map(|e| (e - mean) * (e - mean))
        .collect::<CompensatedSum>()
        .total()
        / n;
    let bias2 = (mean - truth) * (mean - truth);
    Ok(ErrorDecomposition { mse, variance, bias2 })
}

/// One exported interval; `covered` is present when the true value is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub point_id: usize,
    pub interval: IntervalEstimate,
    pub covered: Option<bool>,
}

/// Columns: `point_id,coordinate,kind,level,center,lower,upper,covered`.
pub fn write_intervals_csv<W: Write>(writer: W, records: &[IntervalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["point_id", "coordinate", "kind", "level", "center", "lower", "upper", "covered"])?;
    for r in records {
        let iv = &r.interval;
        w.write_record([
            r.point_id.to_string(),
            iv.coordinate.to_string(),
            iv.kind.as_str().to_string(),
            iv.level.to_string(),
            iv.center.to_string(),
            iv.lower.to_string(),
            iv.upper.to_string(),
            r.covered.map(|c| if c { "1" } else { "0" }.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
