//! Fitting rank parameters to target log-gaps by inverting the closed-form
//! gap formulas.
//!
//! Targets are gaps `d_k = log s_(k) - log s_(k+1)`. A slope target converts
//! with `d_k = slope_k (log k - log(k+1))`.

use std::fmt;
use std::io::Read;

use serde::Serialize;

use crate::analytics;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, RankedWeights};

/// Tolerance on reproduced gaps for a calibration to count as exact.
pub const EXACT_FIT_TOL: f64 = 1e-10;

/// Why a calibration has no solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Infeasibility {
    pub message: String,
    /// First rank at which the recursion broke down.
    pub rank: usize,
    /// Open interval of seeds `sigma_1^2` for which the generalized
    /// recursion stays positive, if any.
    pub feasible_sigma1_sq: Option<(f64, f64)>,
    pub suggestion: Option<String>,
}

impl fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)?;
        if let Some((lo, hi)) = self.feasible_sigma1_sq {
            write!(f, "; feasible sigma_1^2 in ({lo}, {hi})")?;
        }
        if let Some(s) = &self.suggestion {
            write!(f, "; {s}")?;
        }
        Ok(())
    }
}

fn infeasible(inf: Infeasibility) -> Error {
    Error::Infeasible(Box::new(inf))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub spec: ModelSpec,
    pub achieved_gaps: Vec<f64>,
    /// Target minus achieved, per rank.
    pub residuals: Vec<f64>,
    pub exact: bool,
    pub notes: Vec<String>,
}

impl CalibrationResult {
    fn from_spec(spec: ModelSpec, targets: &[f64], mut notes: Vec<String>) -> Result<Self> {
        spec.ensure_valid()?;
        let achieved_gaps = analytics::expected_log_gaps(&spec)?;
        let residuals: Vec<f64> = targets
            .iter()
            .zip(&achieved_gaps)
            .map(|(t, a)| t - a)
            .collect();
        let exact = residuals
            .iter()
            .zip(targets)
            .all(|(r, t)| r.abs() <= EXACT_FIT_TOL * t.abs().max(1.0));
        if !exact {
            notes.push("fitted gaps differ from targets beyond 1e-10".into());
        }
        Ok(CalibrationResult {
            spec,
            achieved_gaps,
            residuals,
            exact,
            notes,
        })
    }
}

fn check_targets(targets: &[f64]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("need at least one target gap".into()));
    }
    if let Some(i) = targets.iter().position(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::InvalidInput(format!(
            "target gap at rank {} is {}",
            i + 1,
            targets[i]
        )));
    }
    if let Some(i) = targets.iter().position(|d| *d == 0.0) {
        return Err(infeasible(Infeasibility {
            message: format!(
                "tie at rank {k}; zero target gap, calibration infeasible at k={k}",
                k = i + 1
            ),
            rank: i + 1,
            feasible_sigma1_sq: None,
            suggestion: Some(
                "break ties with a minimal jitter, e.g. size_k * (1 - 1e-9 * k)".into(),
            ),
        }));
    }
    Ok(())
}

/// Seed `2 g |slope_1|` with the exact slope `-d_1 / log 2` between ranks 1
/// and 2.
pub fn default_sigma1_sq(target_gaps: &[f64], g: f64) -> f64 {
    2.0 * g * target_gaps[0] / std::f64::consts::LN_2
}

/// Open interval of `sigma_1^2` keeping every `sigma_k^2` positive.
///
/// `sigma_k^2 = a_k + (-1)^(k-1) sigma_1^2` with `a_1 = 0` and
/// `a_{k+1} = 4 k g d_k - a_k`.
pub fn feasible_sigma1_sq_interval(target_gaps: &[f64], g: f64) -> Option<(f64, f64)> {
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut a = 0.0;
    for (i, d) in target_gaps.iter().enumerate() {
        a = 4.0 * (i + 1) as f64 * g * d - a;
        // Rank i + 2: odd rank has + sign, even rank has - sign.
        if (i + 2) % 2 == 1 {
            lo = lo.max(-a);
        } else {
            hi = hi.min(a);
        }
    }
    (lo < hi).then_some((lo, hi))
}

/// Per-rank variances of a generalized Atlas model with reversion rate `g`
/// whose expected gaps equal `target_gaps`, by the recursion
/// `sigma_{k+1}^2 = 4 k g d_k - sigma_k^2` from `sigma1_sq`.
pub fn calibrate_generalized(
    target_gaps: &[f64],
    g: f64,
    sigma1_sq: f64,
) -> Result<CalibrationResult> {
    check_targets(target_gaps)?;
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::InvalidInput(format!("g must be positive, got {g}")));
    }
    if !(sigma1_sq > 0.0 && sigma1_sq.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "sigma_1^2 must be positive, got {sigma1_sq}"
        )));
    }
    let mut variances = Vec::with_capacity(target_gaps.len() + 1);
    variances.push(sigma1_sq);
    for (i, d) in target_gaps.iter().enumerate() {
        let k = i + 1;
        let next = 4.0 * k as f64 * g * d - variances[i];
        if next <= 0.0 {
            return Err(infeasible(Infeasibility {
                message: format!(
                    "sigma_{}^2 = {next} is not positive (seed sigma_1^2 = {sigma1_sq})",
                    k + 1
                ),
                rank: k + 1,
                feasible_sigma1_sq: feasible_sigma1_sq_interval(target_gaps, g),
                suggestion: None,
            }));
        }
        variances.push(next);
    }
    let sigmas = variances.iter().map(|v| v.sqrt()).collect();
    CalibrationResult::from_spec(ModelSpec::generalized(g, sigmas), target_gaps, Vec::new())
}

/// Per-rank drifts of a first-order model with the given volatilities whose
/// expected gaps equal `target_gaps`.
///
/// `G_k = g_1 + ... + g_k = -(sigma_k^2 + sigma_{k+1}^2) / (4 d_k)` is negative
/// for every k < n and `g_n = -G_{n-1}` closes the sum, so any positive
/// targets are attainable.
pub fn calibrate_first_order(target_gaps: &[f64], sigmas: &[f64]) -> Result<CalibrationResult> {
    check_targets(target_gaps)?;
    let n = target_gaps.len() + 1;
    if sigmas.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} volatilities supplied for {n} ranks",
            sigmas.len()
        )));
    }
    if let Some(i) = sigmas.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "sigma at rank {} is not positive",
            i + 1
        )));
    }
    let mut gs = Vec::with_capacity(n);
    let mut prev = 0.0;
    for (k, d) in target_gaps.iter().enumerate() {
        let pair = sigmas[k] * sigmas[k] + sigmas[k + 1] * sigmas[k + 1];
        let cum = -pair / (4.0 * d);
        gs.push(cum - prev);
        prev = cum;
    }
    gs.push(-prev);
    CalibrationResult::from_spec(
        ModelSpec::first_order(gs, sigmas.to_vec()),
        target_gaps,
        Vec::new(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedData {
    /// Sizes in descending order.
    pub sizes: Vec<f64>,
    pub weights: RankedWeights,
    pub target_gaps: Vec<f64>,
    /// Ranks k with `d_k = 0`.
    pub ties: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Reads ranked sizes from CSV with a header and either `rank,size` or a
/// single `size` column.
pub fn ingest_ranked_csv<R: Read>(reader: R) -> Result<RankedData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv {
            row: 1,
            detail: e.to_string(),
        })?
        .clone();
    let names: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    let size_col = names
        .iter()
        .position(|h| h == "size")
        .ok_or_else(|| Error::Csv {
            row: 1,
            detail: format!("expected a `size` column, found {:?}", names),
        })?;
    let rank_col = names.iter().position(|h| h == "rank");
    let extra = names.len() - 1 - usize::from(rank_col.is_some());
    if extra > 0 {
        return Err(Error::Csv {
            row: 1,
            detail: format!("expected columns `rank,size` or `size`, found {:?}", names),
        });
    }

    let mut rows: Vec<(f64, f64)> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // Header is row 1.
        let row = i + 2;
        let record = record.map_err(|e| Error::Csv {
            row,
            detail: e.to_string(),
        })?;
        let parse = |col: usize, what: &str| -> Result<f64> {
            let field = record.get(col).unwrap_or("");
            field.parse::<f64>().map_err(|_| Error::Csv {
                row,
                detail: format!("cannot parse {what} {field:?}"),
            })
        };
        let size = parse(size_col, "size")?;
        if !(size > 0.0 && size.is_finite()) {
            return Err(Error::Csv {
                row,
                detail: format!("size must be positive, got {size}"),
            });
        }
        let rank = match rank_col {
            Some(c) => parse(c, "rank")?,
            None => i as f64,
        };
        rows.push((rank, size));
    }
    if rows.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 sizes, got {}",
            rows.len()
        )));
    }

    let mut warnings = Vec::new();
    // Input order: by rank column when present, else file order.
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let input: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut sizes = input.clone();
    sizes.sort_by(|a, b| b.total_cmp(a));
    if sizes != input {
        warnings.push("input not in descending size order; re-sorted by size".into());
    }

    let target_gaps: Vec<f64> = sizes.windows(2).map(|w| w[0].ln() - w[1].ln()).collect();
    let ties: Vec<usize> = target_gaps
        .iter()
        .enumerate()
        .filter(|(_, d)| **d == 0.0)
        .map(|(i, _)| i + 1)
        .collect();
    for k in &ties {
        warnings.push(format!(
            "tie at rank {k}; first-order calibration infeasible at k={k}"
        ));
    }
    let weights = RankedWeights::from_sorted_sizes(&sizes)?;
    Ok(RankedData {
        sizes,
        weights,
        target_gaps,
        ties,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{tangent_slope, SlopeMode};
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn generalized_zipf_targets() {
        let targets: Vec<f64> = (1..10).map(|k| 1.0 / k as f64).collect();
        let r = calibrate_generalized(&targets, 0.5, 1.0).unwrap();
        assert!(r.exact);
        for k in 1..=10 {
            assert_close(r.spec.variance(k).unwrap(), 1.0, 1e-12);
        }
    }

    #[test]
    fn generalized_alternating_targets() {
        let g = 0.5;
        let var = |k: usize| if k % 2 == 1 { 3.0 * g } else { g };
        let targets: Vec<f64> = (1..20)
            .map(|k| (var(k) + var(k + 1)) / (4.0 * k as f64 * g))
            .collect();
        let r = calibrate_generalized(&targets, g, 3.0 * g).unwrap();
        for k in 1..=20 {
            assert_close(r.spec.variance(k).unwrap(), var(k), 1e-12);
        }
    }

    #[test]
    fn generalized_infeasible_seed() {
        let targets: Vec<f64> = (1..10).map(|k| 1.0 / k as f64).collect();
        let err = calibrate_generalized(&targets, 0.5, 3.0).unwrap_err();
        let Error::Infeasible(inf) = err else {
            panic!("expected infeasible")
        };
        assert_eq!(inf.rank, 2);
        assert!(inf.message.contains("sigma_2^2 = -1"));
        // Every a_k is 2 here, so seeds in (0, 2) work.
        assert_eq!(inf.feasible_sigma1_sq, Some((0.0, 2.0)));
    }

    #[test]
    fn default_seed_matches_zipf_slope() {
        let targets: Vec<f64> = (1..10).map(|k| ((k + 1) as f64 / k as f64).ln()).collect();
        assert_close(default_sigma1_sq(&targets, 0.5), 1.0, 1e-15);
    }

    #[test]
    fn first_order_zipf_targets() {
        let n = 12;
        let targets: Vec<f64> = (1..n).map(|k| 1.0 / k as f64).collect();
        let r = calibrate_first_order(&targets, &vec![1.0; n]).unwrap();
        let ModelSpec::FirstOrder { gs, .. } = &r.spec else {
            panic!()
        };
        for g in &gs[..n - 1] {
            assert_close(*g, -0.5, 1e-12);
        }
        assert_close(gs[n - 1], (n - 1) as f64 / 2.0, 1e-12);
        assert!(r.exact);
    }

    #[test]
    fn first_order_concave_target_is_flatter_at_top() {
        // d_k k increasing in k: relatively small top gaps.
        let n = 20;
        let targets: Vec<f64> = (1..n)
            .map(|k| (1.0 + 0.05 * k as f64) * 0.7 / k as f64)
            .collect();
        let r = calibrate_first_order(&targets, &vec![1.0; n]).unwrap();
        let top = tangent_slope(&r.spec, 2, SlopeMode::Asymptotic).unwrap();
        let bottom = tangent_slope(&r.spec, n - 2, SlopeMode::Asymptotic).unwrap();
        assert!(top > -1.0 && bottom < -1.0, "{top} {bottom}");
        assert!(top > bottom);
    }

    #[test]
    fn ties_are_rejected() {
        let err = calibrate_first_order(&[0.0, 0.5], &[1.0; 3]).unwrap_err();
        assert!(err.to_string().contains("tie at rank 1"));
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn ingest_examples() {
        let d = ingest_ranked_csv("size\n100\n50\n25\n".as_bytes()).unwrap();
        for (w, want) in d
            .weights
            .as_slice()
            .iter()
            .zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0])
        {
            assert_close(*w, want, 1e-15);
        }
        for gap in &d.target_gaps {
            assert_close(*gap, 2f64.ln(), 1e-15);
        }
        assert!(d.warnings.is_empty());

        let d = ingest_ranked_csv("rank,size\n1,10\n2,10\n3,5\n".as_bytes()).unwrap();
        assert_eq!(d.target_gaps[0], 0.0);
        assert_eq!(d.ties, vec![1]);
        assert!(d.warnings[0].contains("tie at rank 1; first-order calibration infeasible at k=1"));

        let d = ingest_ranked_csv("rank,size\n2,5\n1,20\n3,7\n".as_bytes()).unwrap();
        assert_eq!(d.sizes, vec![20.0, 7.0, 5.0]);
        assert!(d.warnings[0].contains("re-sorted"));
    }

    #[test]
    fn ingest_errors_name_the_row() {
        let e = ingest_ranked_csv("size\n10\n-1\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Csv { row: 3, .. }), "{e}");
        let e = ingest_ranked_csv("size\n10\nabc\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Csv { row: 3, .. }), "{e}");
        assert!(ingest_ranked_csv("size\n".as_bytes()).is_err());
        assert!(ingest_ranked_csv("".as_bytes()).is_err());
        assert!(ingest_ranked_csv("name,size\na,1\nb,2\n".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_zipf_file_round_trip() {
        let mut text = String::from("rank,size\n");
        for k in 1..=100 {
            text.push_str(&format!("{k},{}\n", 1000.0 / k as f64));
        }
        let d = ingest_ranked_csv(text.as_bytes()).unwrap();
        let r = calibrate_first_order(&d.target_gaps, &vec![1.0; 100]).unwrap();
        for k in 1..100 {
            let s = tangent_slope(&r.spec, k, SlopeMode::Exact).unwrap();
            assert_close(s, -1.0, 1e-9);
        }
    }

    fn random_first_order() -> impl Strategy<Value = ModelSpec> {
        (3usize..20).prop_flat_map(|n| {
            (
                prop::collection::vec(0.05..2.0f64, n - 1),
                prop::collection::vec(0.1..2.0f64, n),
            )
                .prop_map(|(steps, sigmas)| {
                    let mut gs = Vec::new();
                    let mut prev = 0.0;
                    let mut cum = 0.0;
                    for s in steps {
                        cum -= s;
                        gs.push(cum - prev);
                        prev = cum;
                    }
                    gs.push(-prev);
                    ModelSpec::first_order(gs, sigmas)
                })
        })
    }

    proptest! {
        #[test]
        fn first_order_round_trip(spec in random_first_order()) {
            prop_assume!(spec.validate().ok);
            let ModelSpec::FirstOrder { gs, sigmas, .. } = &spec else { unreachable!() };
            let targets = analytics::expected_log_gaps(&spec).unwrap();
            let r = calibrate_first_order(&targets, sigmas).unwrap();
            let ModelSpec::FirstOrder { gs: fitted, .. } = &r.spec else { unreachable!() };
            for (a, b) in gs.iter().zip(fitted) {
                prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
            }
            prop_assert!(r.spec.validate().ok);
        }

        #[test]
        fn first_order_outputs_always_valid(
            targets in prop::collection::vec(1e-3..5.0f64, 1..40),
            sigma in 0.1..3.0f64,
        ) {
            let r = calibrate_first_order(&targets, &vec![sigma; targets.len() + 1]).unwrap();
            prop_assert!(r.spec.validate().ok);
        }

        #[test]
        fn generalized_round_trip(
            g in 0.05..2.0f64,
            sigmas in prop::collection::vec(0.2..2.0f64, 2..30),
        ) {
            let spec = ModelSpec::generalized(g, sigmas.clone());
            let targets = analytics::expected_log_gaps(&spec).unwrap();
            let r = calibrate_generalized(&targets, g, sigmas[0] * sigmas[0]).unwrap();
            for (k, s) in sigmas.iter().enumerate() {
                let v = r.spec.variance(k + 1).unwrap();
                prop_assert!((v - s * s).abs() <= 1e-10 * (s * s).max(1.0));
            }
        }

        #[test]
        fn feasible_interval_interior_succeeds(
            targets in prop::collection::vec(0.01..3.0f64, 1..25),
            g in 0.1..2.0f64,
        ) {
            if let Some((lo, hi)) = feasible_sigma1_sq_interval(&targets, g) {
                let hi = if hi.is_finite() { hi } else { lo + 10.0 };
                for frac in [0.25, 0.5, 0.75] {
                    let seed = lo + frac * (hi - lo);
                    prop_assert!(calibrate_generalized(&targets, g, seed).is_ok());
                }
            }
        }
    }
}
