//! Model families, parameter validation, and rank bookkeeping.
//!
//! All three families are rank-based: the drift and volatility of a name's
//! log-value depend only on its current rank, with rank 1 the largest value.
//! Ranks are 1-based at every public interface.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the zero-sum condition for first-order drifts.
pub const FIRST_ORDER_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub enum ModelSpec {
    /// Common reversion rate `g` and volatility `sigma`; the bottom rank is
    /// pushed up at rate `n * g`.
    StandardAtlas {
        n: usize,
        g: f64,
        sigma: f64,
        gamma: f64,
    },
    /// Common reversion rate, one volatility per rank.
    GeneralizedAtlas {
        n: usize,
        g: f64,
        sigmas: Vec<f64>,
        gamma: f64,
    },
    /// One drift and one volatility per rank.
    FirstOrder {
        n: usize,
        gs: Vec<f64>,
        sigmas: Vec<f64>,
    },
}

impl ModelSpec {
    pub fn standard(n: usize, g: f64, sigma: f64) -> Self {
        ModelSpec::StandardAtlas {
            n,
            g,
            sigma,
            gamma: 0.0,
        }
    }

    pub fn generalized(g: f64, sigmas: Vec<f64>) -> Self {
        ModelSpec::GeneralizedAtlas {
            n: sigmas.len(),
            g,
            sigmas,
            gamma: 0.0,
        }
    }

    pub fn first_order(gs: Vec<f64>, sigmas: Vec<f64>) -> Self {
        ModelSpec::FirstOrder {
            n: gs.len(),
            gs,
            sigmas,
        }
    }

    /// Returns a copy with the system growth rate set. First-order models
    /// carry no growth rate and are returned unchanged.
    pub fn with_gamma(mut self, value: f64) -> Self {
        match &mut self {
            ModelSpec::StandardAtlas { gamma, .. } | ModelSpec::GeneralizedAtlas { gamma, .. } => {
                *gamma = value
            }
            ModelSpec::FirstOrder { .. } => {}
        }
        self
    }

    pub fn n(&self) -> usize {
        match self {
            ModelSpec::StandardAtlas { n, .. }
            | ModelSpec::GeneralizedAtlas { n, .. }
            | ModelSpec::FirstOrder { n, .. } => *n,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            ModelSpec::StandardAtlas { gamma, .. } | ModelSpec::GeneralizedAtlas { gamma, .. } => {
                *gamma
            }
            ModelSpec::FirstOrder { .. } => 0.0,
        }
    }

    /// The shared reversion rate, if the family has one.
    pub fn common_g(&self) -> Option<f64> {
        match self {
            ModelSpec::StandardAtlas { g, .. } | ModelSpec::GeneralizedAtlas { g, .. } => Some(*g),
            ModelSpec::FirstOrder { .. } => None,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            ModelSpec::StandardAtlas { .. } => "standard",
            ModelSpec::GeneralizedAtlas { .. } => "generalized",
            ModelSpec::FirstOrder { .. } => "first_order",
        }
    }

    fn check_rank(&self, k: usize) -> Result<()> {
        let n = self.n();
        if k == 0 || k > n {
            return Err(Error::RankOutOfRange { k, max: n });
        }
        Ok(())
    }

    /// Drift of `log X` for the name currently at rank `k`.
    pub fn log_drift(&self, k: usize) -> Result<f64> {
        self.check_rank(k)?;
        Ok(match self {
            ModelSpec::StandardAtlas { n, g, gamma, .. }
            | ModelSpec::GeneralizedAtlas { n, g, gamma, .. } => {
                let atlas = if k == *n { *n as f64 * g } else { 0.0 };
                gamma - g + atlas
            }
            ModelSpec::FirstOrder { gs, .. } => gs[k - 1],
        })
    }

    /// Volatility of `log X` for the name currently at rank `k`.
    pub fn diffusion(&self, k: usize) -> Result<f64> {
        self.check_rank(k)?;
        Ok(match self {
            ModelSpec::StandardAtlas { sigma, .. } => *sigma,
            ModelSpec::GeneralizedAtlas { sigmas, .. } | ModelSpec::FirstOrder { sigmas, .. } => {
                sigmas[k - 1]
            }
        })
    }

    /// Variance rate `sigma_k^2` at rank `k`.
    pub fn variance(&self, k: usize) -> Result<f64> {
        self.diffusion(k).map(|s| s * s)
    }

    /// Per-rank (drift, volatility) tables, index 0 is rank 1.
    pub fn rank_coefficients(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.n();
        let drift = (1..=n).map(|k| self.log_drift(k)).collect::<Result<_>>()?;
        let vol = (1..=n).map(|k| self.diffusion(k)).collect::<Result<_>>()?;
        Ok((drift, vol))
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let mut push = |constraint: String, index: Option<usize>| {
            violations.push(Violation { constraint, index })
        };

        let n = self.n();
        if n < 2 {
            push(format!("n must be at least 2, got {n}"), None);
        }
        if !self.gamma().is_finite() {
            push("gamma must be finite".into(), None);
        }
        if let Some(g) = self.common_g() {
            if !(g > 0.0 && g.is_finite()) {
                push(format!("g must be positive and finite, got {g}"), None);
            }
        }

        let sigmas: &[f64] = match self {
            ModelSpec::StandardAtlas { sigma, .. } => std::slice::from_ref(sigma),
            ModelSpec::GeneralizedAtlas { sigmas, .. } | ModelSpec::FirstOrder { sigmas, .. } => {
                sigmas
            }
        };
        if !matches!(self, ModelSpec::StandardAtlas { .. }) && sigmas.len() != n {
            push(
                format!("sigmas has length {} but n = {n}", sigmas.len()),
                None,
            );
        }
        for (i, s) in sigmas.iter().enumerate() {
            if !(*s > 0.0 && s.is_finite()) {
                let index = match self {
                    ModelSpec::StandardAtlas { .. } => None,
                    _ => Some(i + 1),
                };
                push(format!("sigma must be positive and finite, got {s}"), index);
            }
        }

        if let ModelSpec::FirstOrder { gs, .. } = self {
            if gs.len() != n {
                push(format!("gs has length {} but n = {n}", gs.len()), None);
            }
            if gs.iter().any(|g| !g.is_finite()) {
                push("gs must be finite".into(), None);
            } else if !gs.is_empty() {
                let mut partial = 0.0;
                for (m, g) in gs.iter().enumerate().take(gs.len() - 1) {
                    partial += g;
                    if partial >= 0.0 {
                        push(format!("partial sum m={} not negative", m + 1), Some(m + 1));
                    }
                }
                let total: f64 = gs.iter().sum();
                if total.abs() > FIRST_ORDER_SUM_TOL {
                    push(format!("drifts must sum to zero, got {total:e}"), None);
                }
            }
        }

        ValidationReport {
            ok: violations.is_empty(),
            violations,
        }
    }

    /// Validates and converts a failing report into an error.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.ok {
            Ok(())
        } else {
            Err(Error::InvalidModel(report.to_string()))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec always serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub constraint: String,
    /// 1-based rank the violation refers to, when it refers to one.
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            return write!(f, "ok");
        }
        let parts: Vec<_> = self
            .violations
            .iter()
            .map(|v| v.constraint.as_str())
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum VariantTag {
    Standard,
    Generalized,
    FirstOrder,
}

/// Wire shape of a [`ModelSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    variant: VariantTag,
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigmas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gs: Option<Vec<f64>>,
}

impl TryFrom<RawSpec> for ModelSpec {
    type Error = String;

    fn try_from(raw: RawSpec) -> std::result::Result<Self, String> {
        fn need<T>(v: Option<T>, key: &str, variant: &str) -> std::result::Result<T, String> {
            v.ok_or_else(|| format!("variant \"{variant}\" requires key \"{key}\""))
        }
        fn forbid<T>(v: &Option<T>, key: &str, variant: &str) -> std::result::Result<(), String> {
            match v {
                Some(_) => Err(format!(
                    "key \"{key}\" is not allowed for variant \"{variant}\""
                )),
                None => Ok(()),
            }
        }

        match raw.variant {
            VariantTag::Standard => {
                forbid(&raw.sigmas, "sigmas", "standard")?;
                forbid(&raw.gs, "gs", "standard")?;
                Ok(ModelSpec::StandardAtlas {
                    n: raw.n,
                    g: need(raw.g, "g", "standard")?,
                    sigma: need(raw.sigma, "sigma", "standard")?,
                    gamma: raw.gamma.unwrap_or(0.0),
                })
            }
            VariantTag::Generalized => {
                forbid(&raw.sigma, "sigma", "generalized")?;
                forbid(&raw.gs, "gs", "generalized")?;
                Ok(ModelSpec::GeneralizedAtlas {
                    n: raw.n,
                    g: need(raw.g, "g", "generalized")?,
                    sigmas: need(raw.sigmas, "sigmas", "generalized")?,
                    gamma: raw.gamma.unwrap_or(0.0),
                })
            }
            VariantTag::FirstOrder => {
                forbid(&raw.g, "g", "first_order")?;
                forbid(&raw.gamma, "gamma", "first_order")?;
                forbid(&raw.sigma, "sigma", "first_order")?;
                Ok(ModelSpec::FirstOrder {
                    n: raw.n,
                    gs: need(raw.gs, "gs", "first_order")?,
                    sigmas: need(raw.sigmas, "sigmas", "first_order")?,
                })
            }
        }
    }
}

impl From<ModelSpec> for RawSpec {
    fn from(spec: ModelSpec) -> Self {
        let nonzero = |g: f64| (g != 0.0).then_some(g);
        match spec {
            ModelSpec::StandardAtlas { n, g, sigma, gamma } => RawSpec {
                variant: VariantTag::Standard,
                n,
                g: Some(g),
                gamma: nonzero(gamma),
                sigma: Some(sigma),
                sigmas: None,
                gs: None,
            },
            ModelSpec::GeneralizedAtlas {
                n,
                g,
                sigmas,
                gamma,
            } => RawSpec {
                variant: VariantTag::Generalized,
                n,
                g: Some(g),
                gamma: nonzero(gamma),
                sigma: None,
                sigmas: Some(sigmas),
                gs: None,
            },
            ModelSpec::FirstOrder { n, gs, sigmas } => RawSpec {
                variant: VariantTag::FirstOrder,
                n,
                g: None,
                gamma: None,
                sigma: None,
                sigmas: Some(sigmas),
                gs: Some(gs),
            },
        }
    }
}

/// Descending by value, ascending by index on exact ties.
#[inline]
pub(crate) fn rank_order(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b]
        .partial_cmp(&values[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 values, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "value at index {} is not finite",
            i + 1
        )));
    }
    Ok(())
}

/// Name indices (0-based) listed from rank 1 down to rank n.
pub fn order_by_rank(values: &[f64]) -> Result<Vec<usize>> {
    check_values(values)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|&a, &b| rank_order(values, a, b));
    Ok(order)
}

/// Rank (1-based) of every name. Rank 1 is the largest value; exact ties go
/// to the lower name index first.
pub fn rank_permutation(values: &[f64]) -> Result<Vec<usize>> {
    let order = order_by_rank(values)?;
    Ok(ranks_from_order(&order))
}

pub(crate) fn ranks_from_order(order: &[usize]) -> Vec<usize> {
    let mut ranks = vec![0; order.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Inverse of a 1-based permutation: position `k - 1` holds the 0-based
/// name at rank `k`.
pub fn invert_ranks(rank_of: &[usize]) -> Vec<usize> {
    let mut order = vec![0; rank_of.len()];
    for (i, &r) in rank_of.iter().enumerate() {
        order[r - 1] = i;
    }
    order
}

/// Ranked market weights `theta_(1) >= ... >= theta_(n) > 0`, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedWeights(Vec<f64>);

impl RankedWeights {
    const SUM_TOL: f64 = 1e-12;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::InvalidInput("ranked weights need n >= 2".into()));
        }
        if let Some(k) = weights.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "weight at rank {} is not strictly positive",
                k + 1
            )));
        }
        if let Some(k) = weights.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput(format!(
                "weights increase between ranks {} and {}",
                k + 1,
                k + 2
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(RankedWeights(weights))
    }

    /// Normalizes positive sizes that are already in descending order.
    pub fn from_sorted_sizes(sizes: &[f64]) -> Result<Self> {
        let total: f64 = sizes.iter().sum();
        Self::new(sizes.iter().map(|s| s / total).collect())
    }

    /// Weights from log-values listed in rank order (largest first).
    pub fn from_ranked_log_values(ranked: &[f64]) -> Result<Self> {
        Self::new(normalized_exp(ranked))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `exp(x_k) / sum_j exp(x_j)`, shifted by the first entry for stability.
pub(crate) fn normalized_exp(ranked: &[f64]) -> Vec<f64> {
    let top = ranked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = ranked.iter().map(|x| (x - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Time, per-name log-values and the rank assignment that goes with them.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    t: f64,
    log_values: Vec<f64>,
    rank_of: Vec<usize>,
    by_rank: Vec<usize>,
}

impl SystemState {
    pub fn new(t: f64, log_values: Vec<f64>) -> Result<Self> {
        let by_rank = order_by_rank(&log_values)?;
        let rank_of = ranks_from_order(&by_rank);
        Ok(SystemState {
            t,
            log_values,
            rank_of,
            by_rank,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    /// 1-based rank of every name.
    pub fn rank_of(&self) -> &[usize] {
        &self.rank_of
    }

    /// 0-based name index at each rank, rank 1 first.
    pub fn by_rank(&self) -> &[usize] {
        &self.by_rank
    }

    pub fn n(&self) -> usize {
        self.log_values.len()
    }

    pub fn ranked_log_value(&self, k: usize) -> f64 {
        self.log_values[self.by_rank[k - 1]]
    }

    pub fn ranked_log_values(&self) -> Vec<f64> {
        self.by_rank.iter().map(|&i| self.log_values[i]).collect()
    }

    /// `log X_(k) - log X_(k+1)` for k = 1..n-1.
    pub fn log_gaps(&self) -> Vec<f64> {
        self.by_rank
            .windows(2)
            .map(|w| self.log_values[w[0]] - self.log_values[w[1]])
            .collect()
    }

    pub fn ranked_weights(&self) -> RankedWeights {
        RankedWeights(normalized_exp(&self.ranked_log_values()))
    }

    pub(crate) fn log_values_mut(&mut self) -> &mut [f64] {
        &mut self.log_values
    }

    pub(crate) fn advance_time(&mut self, dt: f64) {
        self.t += dt;
    }

    /// Restores the rank order after the log-values moved.
    ///
    /// A step usually swaps at most a few neighbours, so the previous order is
    /// repaired by insertion sort when it has only a handful of descents and
    /// rebuilt by a full sort otherwise. Both paths use the same total order,
    /// so the result does not depend on which one ran.
    pub(crate) fn rerank(&mut self) {
        let values = &self.log_values;
        let descents = self
            .by_rank
            .windows(2)
            .filter(|w| rank_order(values, w[0], w[1]) == Ordering::Greater)
            .count();
        if descents == 0 {
            return;
        }
        if descents <= 4 {
            insertion_sort(&mut self.by_rank, values);
        } else {
            self.by_rank
                .sort_unstable_by(|&a, &b| rank_order(values, a, b));
        }
        for (r, &i) in self.by_rank.iter().enumerate() {
            self.rank_of[i] = r + 1;
        }
    }
}

fn insertion_sort(order: &mut [usize], values: &[f64]) {
    for j in 1..order.len() {
        let mut p = j;
        while p > 0 && rank_order(values, order[p - 1], order[p]) == Ordering::Greater {
            order.swap(p - 1, p);
            p -= 1;
        }
    }
}
