//! Exact percentiles and linear scaling fits.

use crate::report::AggregateRow;
use crate::BenchError;

/// Nearest-rank percentile: the value at 1-indexed rank `ceil(q * n)` of the
/// sorted samples.
pub fn percentile(samples: &[f64], q: f64) -> Result<f64, BenchError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(BenchError::InvalidQuantile(q));
    }
    if samples.is_empty() {
        return Err(BenchError::EmptySampleSet);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank(q, sorted.len()) - 1])
}

/// `ceil(q * n)` clamped to `1..=n`, tolerant of the rounding in `q * n`
/// (0.999 * 1000 must give 999).
fn rank(q: f64, n: usize) -> usize {
    let exact = q * n as f64;
    let r = (exact - exact * 1e-12).ceil() as usize;
    r.clamp(1, n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PercentileReport {
    pub p50: f64,
    pub p999: f64,
    pub n: usize,
}

impl PercentileReport {
    /// Percentiles over every sample at once (never an average of
    /// per-stream percentiles).
    pub fn pooled(samples: &[f64]) -> Result<Self, BenchError> {
        Ok(Self {
            p50: percentile(samples, 0.5)?,
            p999: percentile(samples, 0.999)?,
            n: samples.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Topics,
    Subscribers,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`. Needs two distinct `x` values. A
/// fit with zero residual has `r2 = 1` even when `y` is constant.
pub fn least_squares(points: &[(f64, f64)]) -> Result<Fit, BenchError> {
    let distinct = distinct_x(points);
    if distinct < 2 {
        return Err(BenchError::InsufficientPoints {
            found: distinct,
            needed: 2,
        });
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - (intercept + slope * p.0)).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(Fit { slope, intercept, r2 })
}

fn distinct_x(points: &[(f64, f64)]) -> usize {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs.len()
}

pub const MIN_SCALING_POINTS: usize = 4;

/// Fits p50 against the chosen axis over aggregate rows of one metric.
/// Requires at least four distinct axis values.
pub fn scaling_fit(aggregates: &[AggregateRow], axis: Axis) -> Result<Fit, BenchError> {
    let points: Vec<(f64, f64)> = aggregates
        .iter()
        .map(|a| {
            let x = match axis {
                Axis::Topics => a.topics,
                Axis::Subscribers => a.subscribers,
            };
            (x as f64, a.report.p50)
        })
        .collect();
    let found = distinct_x(&points);
    if found < MIN_SCALING_POINTS {
        return Err(BenchError::InsufficientPoints {
            found,
            needed: MIN_SCALING_POINTS,
        });
    }
    least_squares(&points)
}
