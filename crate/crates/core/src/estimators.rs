//! Distribution curves, log-log slope fits and an exponentiality test for
//! sampled gaps.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::RankedWeights;
use crate::simulator::write_table;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub k: usize,
    pub log_k: f64,
    pub log_weight: f64,
}

/// Log ranked weight against log rank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionCurve {
    pub points: Vec<CurvePoint>,
    /// Slope between ranks k and k+1, position `k - 1`.
    pub segment_slopes: Vec<f64>,
}

pub fn distribution_curve(weights: &RankedWeights) -> DistributionCurve {
    let points: Vec<CurvePoint> = weights
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, w)| CurvePoint {
            k: i + 1,
            log_k: ((i + 1) as f64).ln(),
            log_weight: w.ln(),
        })
        .collect();
    let segment_slopes = points
        .windows(2)
        .map(|p| (p[0].log_weight - p[1].log_weight) / (p[0].log_k - p[1].log_k))
        .collect();
    DistributionCurve {
        points,
        segment_slopes,
    }
}

impl DistributionCurve {
    pub fn n(&self) -> usize {
        self.points.len()
    }

    /// Mean segment slope over ranks `k_min..k_max` (segment k joins k and k+1).
    pub fn mean_segment_slope(&self, k_min: usize, k_max: usize) -> f64 {
        let s = &self.segment_slopes[k_min - 1..k_max];
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Writes `curve.csv` with columns `k,log_k,log_weight,segment_slope`;
    /// the last rank has an empty slope.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_table(
            path,
            &["k", "log_k", "log_weight", "segment_slope"],
            self.points.iter().map(|p| {
                let slope = self
                    .segment_slopes
                    .get(p.k - 1)
                    .map(|s| s.to_string())
                    .unwrap_or_default();
                vec![
                    p.k.to_string(),
                    p.log_k.to_string(),
                    p.log_weight.to_string(),
                    slope,
                ]
            }),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub k_min: usize,
    pub k_max: usize,
}

/// Middle rank band `ceil(0.1 n)..=floor(0.9 n)`, widened to three points
/// for small n.
pub fn default_fit_band(n: usize) -> (usize, usize) {
    let lo = (n as f64 * 0.1).ceil().max(1.0) as usize;
    let hi = (n as f64 * 0.9).floor() as usize;
    if hi >= lo + 2 {
        (lo, hi)
    } else {
        (1, n)
    }
}

/// Ordinary least squares of `log theta` on `log k` over ranks
/// `k_min..=k_max`.
pub fn fit_slope(curve: &DistributionCurve, k_min: usize, k_max: usize) -> Result<SlopeFit> {
    if k_min < 1 || k_max > curve.n() || k_min >= k_max {
        return Err(Error::InvalidInput(format!(
            "fit band {k_min}..={k_max} invalid for n = {}",
            curve.n()
        )));
    }
    let pts = &curve.points[k_min - 1..k_max];
    if pts.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "slope fit needs at least 3 points, got {}",
            pts.len()
        )));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.log_k).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.log_weight).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.log_k - mx).powi(2)).sum();
    let sxy: f64 = pts
        .iter()
        .map(|p| (p.log_k - mx) * (p.log_weight - my))
        .sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts
        .iter()
        .map(|p| (p.log_weight - intercept - slope * p.log_k).powi(2))
        .sum();
    let stderr = (sse / (m - 2.0) / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        stderr,
        k_min,
        k_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    /// Asymptotic Kolmogorov p-value. The exponential mean is estimated from
    /// the same samples, which makes this p-value conservative (too large).
    pub p_value: f64,
    pub samples: usize,
    pub fitted_mean: f64,
}

pub const KS_MIN_SAMPLES: usize = 100;

/// Kolmogorov-Smirnov test of gap samples against an exponential law with
/// the sample mean.
pub fn exponentiality_test(samples: &[f64]) -> Result<KsResult> {
    if samples.len() < KS_MIN_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "exponentiality test needs at least {KS_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if let Some(i) = samples.iter().position(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "sample {} is not positive: {}",
            i + 1,
            samples[i]
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;

    let mut d = 0.0f64;
    for (i, x) in sorted.iter().enumerate() {
        let cdf = -(-x / mean).exp_m1();
        d = d.max(cdf - i as f64 / n).max((i + 1) as f64 / n - cdf);
    }
    let sqrt_n = n.sqrt();
    let p_value = kolmogorov_survival((sqrt_n + 0.12 + 0.11 / sqrt_n) * d);
    Ok(KsResult {
        statistic: d,
        p_value,
        samples: sorted.len(),
        fitted_mean: mean,
    })
}

/// `P(K > x)` for the Kolmogorov distribution:
/// `2 sum_{j>=1} (-1)^(j-1) exp(-2 j^2 x^2)`.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.2 {
        // Series converges slowly here and the value is 1 to double precision.
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * x * x).exp();
        sum += sign * term;
        if term < 1e-17 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
