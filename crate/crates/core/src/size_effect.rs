//! Rank-conditioned expected relative returns and their simulated
//! counterparts.
//!
//! Off the bottom rank a name at rank k has expected relative return
//! `(sigma_k^2 / 2g - 1) g`: zero in a Zipfian model, negative for the
//! low-variance top ranks and positive for the high-variance low ranks of a
//! weakly Zipfian model with increasing variances.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::simulator::{self, write_table, SimulationConfig, SteadyStateSample};

/// |z| above which a row is flagged.
pub const Z_FLAG: f64 = 4.0;

/// Expected `dX/X` per unit time for the name at rank `k`, including the
/// Atlas push at `k = n`.
pub fn expected_relative_return(spec: &ModelSpec, k: usize) -> Result<f64> {
    spec.ensure_valid()?;
    if spec.gamma() != 0.0 {
        return Err(Error::NonZeroGamma(spec.gamma()));
    }
    let g = spec.common_g().ok_or(Error::UnsupportedVariant {
        operation: "expected_relative_return",
        variant: spec.variant_name(),
    })?;
    let lambda = spec.variance(k)? / (2.0 * g);
    let atlas = if k == spec.n() {
        spec.n() as f64 * g
    } else {
        0.0
    };
    Ok((lambda - 1.0) * g + atlas)
}

/// Expected one-step relative return of the explicit log scheme, per unit
/// time: `(exp(a dt) - 1) / dt` with `a = drift + sigma^2 / 2`. This is what
/// the simulated column estimates; it tends to `a` as `dt -> 0`.
pub fn discrete_relative_return(spec: &ModelSpec, k: usize, dt: f64) -> Result<f64> {
    let a = spec.log_drift(k)? + 0.5 * spec.variance(k)?;
    Ok((a * dt).exp_m1() / dt)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeEffectRow {
    pub rank: usize,
    /// Expected return adjusted for the time step; the compared value.
    pub analytic: f64,
    /// Continuous-time expected return before the time-step adjustment.
    pub analytic_continuous: f64,
    pub simulated: f64,
    pub stderr: f64,
    pub z: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeEffectTable {
    /// Ranks 1..n-1.
    pub rows: Vec<SizeEffectRow>,
    /// Rank n, carrying the Atlas term.
    pub bottom: SizeEffectRow,
    pub dt: f64,
}

impl SizeEffectTable {
    pub fn simulated(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.simulated).collect()
    }

    /// Writes `size_effect.csv`: ranks 1..n, bottom rank last.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_table(
            path,
            &["rank", "analytic", "simulated", "stderr", "z"],
            self.rows
                .iter()
                .chain(std::iter::once(&self.bottom))
                .map(|r| {
                    vec![
                        r.rank.to_string(),
                        r.analytic.to_string(),
                        r.simulated.to_string(),
                        r.stderr.to_string(),
                        r.z.to_string(),
                    ]
                }),
        )
    }
}

/// Pairs simulated rank-conditioned returns with their expected values.
pub fn size_effect_table(spec: &ModelSpec, sample: &SteadyStateSample) -> Result<SizeEffectTable> {
    let n = spec.n();
    if sample.n != n {
        return Err(Error::InvalidInput(format!(
            "sample has n = {}, spec has n = {n}",
            sample.n
        )));
    }
    let row = |k: usize| -> Result<SizeEffectRow> {
        let analytic_continuous = expected_relative_return(spec, k)?;
        let analytic = discrete_relative_return(spec, k, sample.dt)?;
        let stat = sample.returns[k - 1];
        let z = (stat.mean - analytic) / stat.stderr;
        Ok(SizeEffectRow {
            rank: k,
            analytic,
            analytic_continuous,
            simulated: stat.mean,
            stderr: stat.stderr,
            z,
            flagged: z.abs() > Z_FLAG,
        })
    };
    Ok(SizeEffectTable {
        rows: (1..n).map(row).collect::<Result<_>>()?,
        bottom: row(n)?,
        dt: sample.dt,
    })
}

pub fn size_effect_experiment(
    spec: &ModelSpec,
    config: &SimulationConfig,
) -> Result<(SizeEffectTable, SteadyStateSample)> {
    // Reject unsupported specs before paying for the simulation.
    expected_relative_return(spec, 1)?;
    let sample = simulator::simulate(spec, config)?;
    Ok((size_effect_table(spec, &sample)?, sample))
}
