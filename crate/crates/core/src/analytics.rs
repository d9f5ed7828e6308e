//! Closed-form steady-state quantities for rank-based models.
//!
//! In steady state the log-gap between ranks k and k+1 has mean
//! `(sigma_k^2 + sigma_{k+1}^2) / (-4 (g_1 + ... + g_k))`; for the Atlas
//! families `g_1 + ... + g_k = -k g` and the formula specializes to
//! `(sigma_k^2 + sigma_{k+1}^2) / (4 k g)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{normalized_exp, ModelSpec, RankedWeights};

/// Tolerance on `sigma_k^2 / 2g - 1` for the Zipfian check.
pub const ZIPFIAN_TOL: f64 = 1e-9;
/// Weak-Zipf residual tolerance when the weight means are known exactly.
pub const WEAK_ZIPF_TOL_EXACT: f64 = 1e-6;
/// Weak-Zipf residual tolerance for surrogate or simulated weight means.
pub const WEAK_ZIPF_TOL_ESTIMATED: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeMode {
    /// Gap divided by `log k - log(k+1)`.
    Exact,
    /// Large-k limit, where `k (log(k+1) - log k) -> 1`.
    Asymptotic,
}

fn check_analytic(spec: &ModelSpec) -> Result<()> {
    spec.ensure_valid()?;
    if spec.gamma() != 0.0 {
        return Err(Error::NonZeroGamma(spec.gamma()));
    }
    Ok(())
}

fn check_gap_rank(spec: &ModelSpec, k: usize) -> Result<()> {
    let max = spec.n() - 1;
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { k, max });
    }
    Ok(())
}

/// `g_1 + ... + g_k`, the cumulative drift of the top k ranks.
fn cumulative_drift(spec: &ModelSpec, k: usize) -> f64 {
    match spec {
        ModelSpec::StandardAtlas { g, .. } | ModelSpec::GeneralizedAtlas { g, .. } => {
            -(k as f64) * g
        }
        ModelSpec::FirstOrder { gs, .. } => gs[..k].iter().sum(),
    }
}

fn pair_variance(spec: &ModelSpec, k: usize) -> f64 {
    spec.variance(k).unwrap() + spec.variance(k + 1).unwrap()
}

fn gap_unchecked(spec: &ModelSpec, k: usize) -> f64 {
    match spec {
        ModelSpec::StandardAtlas { g, sigma, .. } => sigma * sigma / (2.0 * k as f64 * g),
        _ => pair_variance(spec, k) / (-4.0 * cumulative_drift(spec, k)),
    }
}

/// Steady-state mean of `log X_(k) - log X_(k+1)`, for k in 1..n-1.
pub fn expected_log_gap(spec: &ModelSpec, k: usize) -> Result<f64> {
    check_analytic(spec)?;
    check_gap_rank(spec, k)?;
    Ok(gap_unchecked(spec, k))
}

/// All n-1 expected log gaps.
pub fn expected_log_gaps(spec: &ModelSpec) -> Result<Vec<f64>> {
    check_analytic(spec)?;
    Ok((1..spec.n()).map(|k| gap_unchecked(spec, k)).collect())
}

/// Log-log slope of the distribution curve between ranks k and k+1.
pub fn tangent_slope(spec: &ModelSpec, k: usize, mode: SlopeMode) -> Result<f64> {
    check_analytic(spec)?;
    check_gap_rank(spec, k)?;
    Ok(match mode {
        SlopeMode::Exact => {
            let kf = k as f64;
            gap_unchecked(spec, k) / (kf.ln() - (kf + 1.0).ln())
        }
        SlopeMode::Asymptotic => match spec {
            ModelSpec::StandardAtlas { g, sigma, .. } => -sigma * sigma / (2.0 * g),
            ModelSpec::GeneralizedAtlas { g, .. } => -pair_variance(spec, k) / (4.0 * g),
            ModelSpec::FirstOrder { .. } => {
                k as f64 * pair_variance(spec, k) / (4.0 * cumulative_drift(spec, k))
            }
        },
    })
}

/// Pareto parameter `sigma^2 / 2g` of a standard Atlas model.
pub fn pareto_parameter(spec: &ModelSpec) -> Result<f64> {
    check_analytic(spec)?;
    match spec {
        ModelSpec::StandardAtlas { g, sigma, .. } => Ok(sigma * sigma / (2.0 * g)),
        other => Err(Error::UnsupportedVariant {
            operation: "pareto_parameter",
            variant: other.variant_name(),
        }),
    }
}

/// Log ranked weights obtained by telescoping the expected gaps, shifted so
/// that their exponentials sum to one.
///
/// This is `log E[theta]` only approximately: exponentiating expected logs
/// understates the mean weights (Jensen), most visibly at the top ranks.
pub fn expected_log_weights(spec: &ModelSpec) -> Result<Vec<f64>> {
    let gaps = expected_log_gaps(spec)?;
    let mut values = Vec::with_capacity(spec.n());
    let mut acc = 0.0;
    values.push(acc);
    for d in &gaps {
        acc -= d;
        values.push(acc);
    }
    let top = values[0];
    let log_total = values.iter().map(|v| (v - top).exp()).sum::<f64>().ln() + top;
    values.iter_mut().for_each(|v| *v -= log_total);
    Ok(values)
}

/// Surrogate for the steady-state mean weights: `exp` of
/// [`expected_log_weights`], renormalized.
pub fn surrogate_weights(spec: &ModelSpec) -> Result<RankedWeights> {
    RankedWeights::new(normalized_exp(&expected_log_weights(spec)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ZipfKind {
    Zipfian,
    WeaklyZipfian,
    Neither,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Surrogate,
    Simulated,
    Exact,
}

/// Mean ranked weights used to evaluate the weak-Zipf residual.
#[derive(Debug, Clone)]
pub enum WeightMeans {
    /// Use [`surrogate_weights`] of the spec being classified.
    Surrogate,
    Simulated(RankedWeights),
    Exact(RankedWeights),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZipfClassification {
    pub kind: ZipfKind,
    /// `sum_k (sigma_k^2 / 2g - 1) E[theta_(k)]`.
    pub residual: f64,
    /// `sigma_k^2 / 2g` for k = 1..n.
    pub per_rank_lambda: Vec<f64>,
    pub weight_source: WeightSource,
    pub tolerance: f64,
}

pub fn zipf_classify(spec: &ModelSpec, weights: WeightMeans) -> Result<ZipfClassification> {
    check_analytic(spec)?;
    let g = spec.common_g().ok_or(Error::UnsupportedVariant {
        operation: "zipf_classify",
        variant: spec.variant_name(),
    })?;
    let n = spec.n();
    let per_rank_lambda: Vec<f64> = (1..=n)
        .map(|k| spec.variance(k).unwrap() / (2.0 * g))
        .collect();

    let (theta, weight_source, tolerance) = match weights {
        WeightMeans::Surrogate => (
            surrogate_weights(spec)?,
            WeightSource::Surrogate,
            WEAK_ZIPF_TOL_ESTIMATED,
        ),
        WeightMeans::Simulated(w) => (w, WeightSource::Simulated, WEAK_ZIPF_TOL_ESTIMATED),
        WeightMeans::Exact(w) => (w, WeightSource::Exact, WEAK_ZIPF_TOL_EXACT),
    };
    if theta.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} weights supplied for a model with n = {n}",
            theta.len()
        )));
    }

    let residual: f64 = per_rank_lambda
        .iter()
        .zip(theta.as_slice())
        .map(|(l, w)| (l - 1.0) * w)
        .sum();
    let kind = if per_rank_lambda
        .iter()
        .all(|l| (l - 1.0).abs() <= ZIPFIAN_TOL)
    {
        ZipfKind::Zipfian
    } else if residual.abs() <= tolerance {
        ZipfKind::WeaklyZipfian
    } else {
        ZipfKind::Neither
    };

    Ok(ZipfClassification {
        kind,
        residual,
        per_rank_lambda,
        weight_source,
        tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakZipfSolution {
    pub g: f64,
    /// `sum_k (sigma_k^2 / 2g - 1) theta_(k)(g)` with the oracle's weights at `g`.
    pub residual: f64,
    /// Oracle evaluations performed.
    pub iterations: usize,
    pub converged: bool,
}

/// Finds the common reversion rate that makes a generalized Atlas model with
/// the given volatilities weakly Zipfian.
///
/// Since the weights sum to one the condition reads
/// `2g = sum_k sigma_k^2 theta_(k)(g)`, iterated as a fixed point from
/// `g = mean(sigma_k^2) / 2`. The returned `g` is the iterate whose weights
/// were evaluated, so `residual` describes that exact `g`. Without
/// convergence the iterate with the smallest residual is returned.
pub fn solve_weak_zipf_g<F>(
    sigmas: &[f64],
    mut weight_oracle: F,
    max_iter: usize,
    tol: f64,
) -> Result<WeakZipfSolution>
where
    F: FnMut(f64) -> Result<RankedWeights>,
{
    if sigmas.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 volatilities".into()));
    }
    if let Some(k) = sigmas.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "sigma at rank {} is not positive",
            k + 1
        )));
    }
    if max_iter == 0 || tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidInput(
            "max_iter must be positive and tol > 0".into(),
        ));
    }
    let variances: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
    let mut g = 0.5 * variances.iter().sum::<f64>() / variances.len() as f64;
    let mut best: Option<WeakZipfSolution> = None;

    for iteration in 1..=max_iter {
        let theta = weight_oracle(g)?;
        if theta.len() != sigmas.len() {
            return Err(Error::InvalidInput(format!(
                "oracle returned {} weights for {} volatilities",
                theta.len(),
                sigmas.len()
            )));
        }
        let next = 0.5
            * variances
                .iter()
                .zip(theta.as_slice())
                .map(|(v, w)| v * w)
                .sum::<f64>();
        let candidate = WeakZipfSolution {
            g,
            residual: next / g - 1.0,
            iterations: iteration,
            converged: ((next - g) / g).abs() <= tol,
        };
        if candidate.converged {
            return Ok(candidate);
        }
        if best
            .as_ref()
            .is_none_or(|b| candidate.residual.abs() < b.residual.abs())
        {
            best = Some(candidate);
        }
        g = next;
    }

    let mut best = best.expect("max_iter >= 1");
    best.iterations = max_iter;
    Ok(best)
}

/// Weight oracle backed by [`surrogate_weights`] of a generalized model.
pub fn surrogate_oracle(sigmas: &[f64]) -> impl FnMut(f64) -> Result<RankedWeights> + '_ {
    move |g| surrogate_weights(&ModelSpec::generalized(g, sigmas.to_vec()))
}
