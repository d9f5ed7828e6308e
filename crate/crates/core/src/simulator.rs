//! Monte Carlo integration of rank-based systems in log coordinates.
//!
//! Each step moves every name by the drift and volatility of the rank it held
//! at the start of the step, then re-ranks. Replicas run independently (in
//! parallel when rayon has threads) and every (replica, name) pair draws from
//! its own ChaCha stream, so results depend only on the seed and the replica
//! count.

use std::path::{Path as FsPath, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, RankedWeights, SystemState};

/// Upper bound on memory held by gap reservoirs.
pub const RESERVOIR_MEMORY_BUDGET: usize = 256 << 20;

fn default_stride() -> u64 {
    1
}
fn default_replicas() -> usize {
    1
}
fn default_reservoir_stride() -> u64 {
    100
}
fn default_reservoir_capacity() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt: f64,
    pub burn_in_steps: u64,
    pub sample_steps: u64,
    /// Record gaps, weights and returns every `sample_stride` steps.
    #[serde(default = "default_stride")]
    pub sample_stride: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    pub seed: u64,
    /// Distance between the top and bottom initial log-values. Defaults to
    /// the sum of the closed-form expected gaps.
    #[serde(default)]
    pub initial_spread: Option<f64>,
    /// Gap samples kept per rank across all replicas; 0 disables.
    #[serde(default = "default_reservoir_capacity")]
    pub reservoir_capacity: usize,
    /// Minimum spacing, in steps, between gap samples offered to a reservoir.
    #[serde(default = "default_reservoir_stride")]
    pub reservoir_stride: u64,
}

impl SimulationConfig {
    pub fn new(dt: f64, burn_in_steps: u64, sample_steps: u64, seed: u64) -> Self {
        SimulationConfig {
            dt,
            burn_in_steps,
            sample_steps,
            sample_stride: 1,
            replicas: 1,
            seed,
            initial_spread: None,
            reservoir_capacity: default_reservoir_capacity(),
            reservoir_stride: default_reservoir_stride(),
        }
    }

    pub fn with_replicas(mut self, replicas: usize) -> Self {
        self.replicas = replicas;
        self
    }

    pub fn with_stride(mut self, stride: u64) -> Self {
        self.sample_stride = stride;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        if self.burn_in_steps < 1 || self.sample_steps < 1 {
            return fail("burn_in_steps and sample_steps must be at least 1".into());
        }
        if self.replicas < 1 {
            return fail("replicas must be at least 1".into());
        }
        if self.sample_stride < 1 || self.reservoir_stride < 1 {
            return fail("strides must be at least 1".into());
        }
        if let Some(s) = self.initial_spread {
            if !(s >= 0.0 && s.is_finite()) {
                return fail(format!("initial_spread must be non-negative, got {s}"));
            }
        }
        let reservoir_bytes = self
            .reservoir_capacity
            .saturating_mul(n.saturating_sub(1))
            .saturating_mul(std::mem::size_of::<f64>());
        if reservoir_bytes > RESERVOIR_MEMORY_BUDGET {
            return fail(format!(
                "gap reservoirs need {reservoir_bytes} bytes, budget is {RESERVOIR_MEMORY_BUDGET}; \
                 lower reservoir_capacity or set it to 0 for streaming aggregation only"
            ));
        }
        Ok(())
    }
}

/// Mean, standard error and sample count of one per-rank statistic. The
/// standard error is the batch-means estimate over 32 batches per replica.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankStat {
    pub mean: f64,
    pub stderr: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    #[inline]
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        self.mean += delta * nb / total as f64;
        self.m2 += other.m2 + delta * delta * na * nb / total as f64;
        self.count = total;
    }

    fn naive_stderr(&self) -> f64 {
        if self.count > 1 {
            (self.m2 / (self.count - 1) as f64 / self.count as f64).sqrt()
        } else {
            f64::NAN
        }
    }
}

/// Batches per replica for the standard error.
const BATCHES_PER_REPLICA: u64 = 32;

/// Running moments plus batch means. Consecutive steps are strongly
/// correlated, so the standard error comes from the spread of the batch
/// means rather than of the raw samples.
#[derive(Debug, Clone, Copy)]
struct BatchedMoments {
    all: Moments,
    batches: Moments,
    batch_len: u64,
    batch_sum: f64,
    batch_count: u64,
}

impl BatchedMoments {
    fn new(batch_len: u64) -> Self {
        BatchedMoments {
            all: Moments::default(),
            batches: Moments::default(),
            batch_len: batch_len.max(1),
            batch_sum: 0.0,
            batch_count: 0,
        }
    }

    #[inline]
    fn push(&mut self, x: f64) {
        self.all.push(x);
        self.batch_sum += x;
        self.batch_count += 1;
        if self.batch_count == self.batch_len {
            self.batches.push(self.batch_sum / self.batch_len as f64);
            self.batch_sum = 0.0;
            self.batch_count = 0;
        }
    }

    /// Merges the completed batches and all samples; a trailing partial
    /// batch only contributes to the mean.
    fn merge(&mut self, other: &BatchedMoments) {
        self.all.merge(&other.all);
        self.batches.merge(&other.batches);
    }

    fn stat(&self) -> RankStat {
        let stderr = if self.batches.count > 1 {
            self.batches.naive_stderr()
        } else {
            self.all.naive_stderr()
        };
        RankStat {
            mean: self.all.mean,
            stderr,
            count: self.all.count,
        }
    }
}

/// Keeps every `stride`-th offered value; when full, drops every other kept
/// value and doubles the stride, so the kept values stay evenly spread over
/// the whole run.
#[derive(Debug, Clone)]
struct ThinningReservoir {
    capacity: usize,
    stride: u64,
    offered: u64,
    values: Vec<f64>,
}

impl ThinningReservoir {
    fn new(capacity: usize) -> Self {
        ThinningReservoir {
            capacity,
            stride: 1,
            offered: 0,
            values: Vec::with_capacity(capacity),
        }
    }

    fn offer(&mut self, x: f64) {
        if self.capacity == 0 {
            return;
        }
        if self.offered.is_multiple_of(self.stride) {
            if self.values.len() == self.capacity {
                let mut keep = 0;
                for i in (0..self.values.len()).step_by(2) {
                    self.values[keep] = self.values[i];
                    keep += 1;
                }
                self.values.truncate(keep);
                self.stride *= 2;
                if !self.offered.is_multiple_of(self.stride) {
                    self.offered += 1;
                    return;
                }
            }
            self.values.push(x);
        }
        self.offered += 1;
    }
}

/// Steady-state Monte Carlo estimates, ranks 1-based in position `k - 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateSample {
    pub n: usize,
    pub dt: f64,
    /// `log X_(k) - log X_(k+1)` for k = 1..n-1.
    pub gaps: Vec<RankStat>,
    /// Ranked weights `theta_(k)`.
    pub weights: Vec<RankStat>,
    /// Realized one-step relative return `(X(t+dt) - X(t)) / X(t) / dt`,
    /// attributed to the rank held at `t`.
    pub returns: Vec<RankStat>,
    /// Decorrelated gap samples per rank, replica 0 first.
    #[serde(skip)]
    pub gap_samples: Vec<Vec<f64>>,
}

impl SteadyStateSample {
    pub fn gap_means(&self) -> Vec<f64> {
        self.gaps.iter().map(|s| s.mean).collect()
    }

    pub fn return_means(&self) -> Vec<f64> {
        self.returns.iter().map(|s| s.mean).collect()
    }

    /// Weight means, renormalized against rounding in the running averages.
    pub fn weight_means(&self) -> Result<RankedWeights> {
        let total: f64 = self.weights.iter().map(|s| s.mean).sum();
        RankedWeights::new(self.weights.iter().map(|s| s.mean / total).collect())
    }

    /// Writes `gaps.csv`, `weights.csv` and `returns.csv` into `dir`.
    pub fn write_csvs(&self, dir: &FsPath) -> Result<Vec<PathBuf>> {
        let gaps = dir.join("gaps.csv");
        write_table(
            &gaps,
            &["rank", "mean", "stderr", "count"],
            self.gaps.iter().enumerate().map(|(i, s)| {
                vec![
                    (i + 1).to_string(),
                    s.mean.to_string(),
                    s.stderr.to_string(),
                    s.count.to_string(),
                ]
            }),
        )?;
        let weights = dir.join("weights.csv");
        write_table(
            &weights,
            &["rank", "mean", "stderr"],
            self.weights.iter().enumerate().map(|(i, s)| {
                vec![
                    (i + 1).to_string(),
                    s.mean.to_string(),
                    s.stderr.to_string(),
                ]
            }),
        )?;
        let returns = dir.join("returns.csv");
        write_table(
            &returns,
            &["rank", "mean_annualized", "stderr", "count"],
            self.returns.iter().enumerate().map(|(i, s)| {
                vec![
                    (i + 1).to_string(),
                    s.mean.to_string(),
                    s.stderr.to_string(),
                    s.count.to_string(),
                ]
            }),
        )?;
        Ok(vec![gaps, weights, returns])
    }
}

pub(crate) fn write_table<I>(path: &FsPath, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(header).map_err(csv_io)?;
    for row in rows {
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Advances `state` by one explicit step.
///
/// `noise` holds one standard normal per name. Drift and volatility come
/// from the rank each name holds before the step.
pub fn step(state: &SystemState, spec: &ModelSpec, dt: f64, noise: &[f64]) -> Result<SystemState> {
    if noise.len() != state.n() || spec.n() != state.n() {
        return Err(Error::InvalidInput(format!(
            "state has {} names, spec {}, noise {}",
            state.n(),
            spec.n(),
            noise.len()
        )));
    }
    let (drift, vol) = spec.rank_coefficients()?;
    let mut next = state.clone();
    apply_step(&mut next, &drift, &vol, dt, dt.sqrt(), noise, None)
        .map_err(|detail| Error::NumericalFailure { step: 1, detail })?;
    Ok(next)
}

#[inline]
fn apply_step(
    state: &mut SystemState,
    drift: &[f64],
    vol: &[f64],
    dt: f64,
    sqrt_dt: f64,
    noise: &[f64],
    mut deltas: Option<&mut [f64]>,
) -> std::result::Result<(), String> {
    let n = state.n();
    let mut finite = true;
    for i in 0..n {
        let k = state.rank_of()[i] - 1;
        let d = drift[k] * dt + vol[k] * sqrt_dt * noise[i];
        let x = &mut state.log_values_mut()[i];
        *x += d;
        finite &= x.is_finite();
        if let Some(out) = deltas.as_deref_mut() {
            out[i] = d;
        }
    }
    if !finite {
        let bad = state
            .log_values()
            .iter()
            .position(|x| !x.is_finite())
            .unwrap_or(0);
        return Err(format!("log-value of name {} is not finite", bad + 1));
    }
    state.advance_time(dt);
    state.rerank();
    Ok(())
}

/// Independent stream for one (replica, name) pair.
pub fn name_stream(seed: u64, replica: usize, name: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((replica as u64) << 32) | name as u64);
    rng
}

/// Equally spaced log-values from `spread` (name 1) down to 0 (name n).
pub fn initial_log_values(n: usize, spread: f64) -> Vec<f64> {
    let last = (n - 1) as f64;
    (0..n).map(|i| spread * (last - i as f64) / last).collect()
}

fn default_spread(spec: &ModelSpec) -> Result<f64> {
    let gaps = analytics::expected_log_gaps(&spec.clone().with_gamma(0.0))?;
    Ok(gaps.iter().sum())
}

/// One simulated trajectory of a rank-based system.
#[derive(Debug, Clone)]
pub struct Path {
    state: SystemState,
    drift: Vec<f64>,
    vol: Vec<f64>,
    dt: f64,
    sqrt_dt: f64,
    rngs: Vec<ChaCha8Rng>,
    noise: Vec<f64>,
    steps: u64,
}

impl Path {
    /// Path for `replica` with the configured initial condition and streams.
    pub fn new(spec: &ModelSpec, config: &SimulationConfig, replica: usize) -> Result<Self> {
        spec.ensure_valid()?;
        config.validate(spec.n())?;
        let n = spec.n();
        let spread = match config.initial_spread {
            Some(s) => s,
            None => default_spread(spec)?,
        };
        let rngs = (0..n)
            .map(|i| name_stream(config.seed, replica, i))
            .collect();
        Self::from_parts(spec, config.dt, initial_log_values(n, spread), rngs)
    }

    fn from_parts(
        spec: &ModelSpec,
        dt: f64,
        log_values: Vec<f64>,
        rngs: Vec<ChaCha8Rng>,
    ) -> Result<Self> {
        let (drift, vol) = spec.rank_coefficients()?;
        let n = spec.n();
        Ok(Path {
            state: SystemState::new(0.0, log_values)?,
            drift,
            vol,
            dt,
            sqrt_dt: dt.sqrt(),
            rngs,
            noise: vec![0.0; n],
            steps: 0,
        })
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn draw(&mut self) {
        for (z, rng) in self.noise.iter_mut().zip(&mut self.rngs) {
            *z = StandardNormal.sample(rng);
        }
    }

    pub fn advance(&mut self) -> Result<()> {
        self.advance_recording(None)
    }

    fn advance_recording(&mut self, deltas: Option<&mut [f64]>) -> Result<()> {
        self.draw();
        self.steps += 1;
        apply_step(
            &mut self.state,
            &self.drift,
            &self.vol,
            self.dt,
            self.sqrt_dt,
            &self.noise,
            deltas,
        )
        .map_err(|detail| Error::NumericalFailure {
            step: self.steps,
            detail,
        })
    }
}

#[derive(Debug, Clone)]
struct ReplicaSums {
    gaps: Vec<BatchedMoments>,
    weights: Vec<BatchedMoments>,
    returns: Vec<BatchedMoments>,
    reservoirs: Vec<ThinningReservoir>,
}

fn run_replica(
    spec: &ModelSpec,
    config: &SimulationConfig,
    replica: usize,
    reservoir_capacity: usize,
) -> Result<ReplicaSums> {
    let n = spec.n();
    let mut path = Path::new(spec, config, replica)?;
    for _ in 0..config.burn_in_steps {
        path.advance()?;
    }

    let recorded = config.sample_steps.div_ceil(config.sample_stride);
    let moments = BatchedMoments::new(recorded / BATCHES_PER_REPLICA);
    let mut sums = ReplicaSums {
        gaps: vec![moments; n - 1],
        weights: vec![moments; n],
        returns: vec![moments; n],
        reservoirs: vec![ThinningReservoir::new(reservoir_capacity); n - 1],
    };
    let mut deltas = vec![0.0; n];
    let mut ranks_before = vec![0usize; n];
    let mut ranked = vec![0.0; n];
    let dt = config.dt;

    for s in 0..config.sample_steps {
        let record = s % config.sample_stride == 0;
        let offer = reservoir_capacity > 0 && s % config.reservoir_stride == 0;
        if !(record || offer) {
            path.advance()?;
            continue;
        }
        ranks_before.copy_from_slice(path.state().rank_of());
        path.advance_recording(Some(&mut deltas))?;
        let state = path.state();

        for (k, &i) in state.by_rank().iter().enumerate() {
            ranked[k] = state.log_values()[i];
        }
        if offer {
            for (k, r) in sums.reservoirs.iter_mut().enumerate() {
                r.offer(ranked[k] - ranked[k + 1]);
            }
        }
        if record {
            for (i, &d) in deltas.iter().enumerate() {
                sums.returns[ranks_before[i] - 1].push(d.exp_m1() / dt);
            }
            for k in 0..n - 1 {
                sums.gaps[k].push(ranked[k] - ranked[k + 1]);
            }
            let top = ranked[0];
            let total: f64 = ranked.iter().map(|x| (x - top).exp()).sum();
            for (k, x) in ranked.iter().enumerate() {
                sums.weights[k].push((x - top).exp() / total);
            }
        }
    }
    Ok(sums)
}

/// Runs all replicas and aggregates their steady-state statistics.
///
/// Replica partial sums are merged in replica order, so the output is the
/// same for any thread count.
pub fn simulate(spec: &ModelSpec, config: &SimulationConfig) -> Result<SteadyStateSample> {
    spec.ensure_valid()?;
    config.validate(spec.n())?;
    let n = spec.n();
    let per_replica_capacity = config.reservoir_capacity.div_ceil(config.replicas);

    let parts = (0..config.replicas)
        .into_par_iter()
        .map(|r| run_replica(spec, config, r, per_replica_capacity))
        .collect::<Result<Vec<_>>>()?;

    let empty = BatchedMoments::new(1);
    let mut gaps = vec![empty; n - 1];
    let mut weights = vec![empty; n];
    let mut returns = vec![empty; n];
    let mut gap_samples = vec![Vec::new(); n - 1];
    for part in &parts {
        for (acc, m) in gaps.iter_mut().zip(&part.gaps) {
            acc.merge(m);
        }
        for (acc, m) in weights.iter_mut().zip(&part.weights) {
            acc.merge(m);
        }
        for (acc, m) in returns.iter_mut().zip(&part.returns) {
            acc.merge(m);
        }
        for (acc, r) in gap_samples.iter_mut().zip(&part.reservoirs) {
            acc.extend_from_slice(&r.values);
        }
    }

    Ok(SteadyStateSample {
        n,
        dt: config.dt,
        gaps: gaps.iter().map(BatchedMoments::stat).collect(),
        weights: weights.iter().map(BatchedMoments::stat).collect(),
        returns: returns.iter().map(BatchedMoments::stat).collect(),
        gap_samples,
    })
}

/// Fraction of steps with a multi-rank jump above which `dt` is flagged.
pub const MULTI_RANK_JUMP_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTransitionReport {
    pub steps: u64,
    /// Entry d counts steps whose largest rank displacement was d.
    pub jump_histogram: Vec<u64>,
    /// `transitions[from - 1][to - 1]` counts name-steps moving between ranks.
    pub transitions: Vec<Vec<u64>>,
    /// Fraction of steps with at least one rank change.
    pub any_change_fraction: f64,
    /// Fraction of steps where some name moved two or more ranks.
    pub multi_rank_fraction: f64,
    pub flags: Vec<String>,
}

/// Counts rank changes over `sample_steps` steps of replica 0, after burn-in.
pub fn rank_transition_counts(
    spec: &ModelSpec,
    config: &SimulationConfig,
) -> Result<RankTransitionReport> {
    let n = spec.n();
    let mut path = Path::new(spec, config, 0)?;
    for _ in 0..config.burn_in_steps {
        path.advance()?;
    }
    let mut jump_histogram = vec![0u64; n];
    let mut transitions = vec![vec![0u64; n]; n];
    let mut before = vec![0usize; n];
    for _ in 0..config.sample_steps {
        before.copy_from_slice(path.state().rank_of());
        path.advance()?;
        let mut max_jump = 0;
        for (i, &from) in before.iter().enumerate() {
            let to = path.state().rank_of()[i];
            transitions[from - 1][to - 1] += 1;
            max_jump = max_jump.max(from.abs_diff(to));
        }
        jump_histogram[max_jump] += 1;
    }

    let steps = config.sample_steps;
    let any_change_fraction = (steps - jump_histogram[0]) as f64 / steps as f64;
    let multi: u64 = jump_histogram.iter().skip(2).sum();
    let multi_rank_fraction = multi as f64 / steps as f64;
    let mut flags = Vec::new();
    if multi_rank_fraction > MULTI_RANK_JUMP_LIMIT {
        flags.push(format!(
            "multi-rank jumps exceed {}% of steps ({:.2}%); reduce dt",
            MULTI_RANK_JUMP_LIMIT * 100.0,
            multi_rank_fraction * 100.0
        ));
    }
    Ok(RankTransitionReport {
        steps,
        jump_histogram,
        transitions,
        any_change_fraction,
        multi_rank_fraction,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn zipfian(n: usize) -> ModelSpec {
        ModelSpec::standard(n, 0.5, 1.0)
    }

    #[test]
    fn zero_noise_drift() {
        let spec = zipfian(10);
        let values: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        let state = SystemState::new(0.0, values.clone()).unwrap();
        let next = step(&state, &spec, 0.01, &[0.0; 10]).unwrap();
        // Name 2 sits at rank 2.
        assert!((next.log_values()[1] - (values[1] - 0.005)).abs() < 1e-15);
        // Name 10 is at the bottom and gets the Atlas push.
        assert!((next.log_values()[9] - (values[9] + 0.045)).abs() < 1e-15);
        assert!((next.t() - 0.01).abs() < 1e-18);
    }

    #[test]
    fn step_rejects_overflow_and_bad_noise() {
        let spec = ModelSpec::standard(3, 0.5, 10.0);
        let state = SystemState::new(0.0, vec![1.0, 0.5, 0.0]).unwrap();
        assert!(step(&state, &spec, 0.01, &[0.0; 2]).is_err());
        let err = step(&state, &spec, 1.0, &[f64::MAX, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NumericalFailure { .. }));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let spec = zipfian(6);
        let cfg = SimulationConfig::new(1e-3, 1, 1, 99);
        let mut a = Path::new(&spec, &cfg, 0).unwrap();
        let mut b = Path::new(&spec, &cfg, 0).unwrap();
        for _ in 0..2 {
            a.advance().unwrap();
            b.advance().unwrap();
        }
        let bits = |p: &Path| {
            p.state()
                .log_values()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        let c = Path::new(&spec, &cfg, 1).unwrap();
        let mut c = c;
        c.advance().unwrap();
        c.advance().unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = name_stream(7, 0, 0);
        let mut b = name_stream(7, 0, 1);
        let mut c = name_stream(7, 1, 0);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert!(x != y && x != z && y != z);
    }

    #[test]
    fn initial_values_span_spread() {
        let v = initial_log_values(5, 2.0);
        assert_eq!(v, vec![2.0, 1.5, 1.0, 0.5, 0.0]);
        let spec = zipfian(5);
        let p = Path::new(&spec, &SimulationConfig::new(1e-3, 1, 1, 0), 0).unwrap();
        let spread = 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
        assert!((p.state().log_values()[0] - spread).abs() < 1e-15);
    }

    #[test]
    fn thinning_reservoir_stays_even() {
        let mut r = ThinningReservoir::new(8);
        for i in 0..100 {
            r.offer(i as f64);
        }
        assert!(r.values.len() <= 8);
        let spacing: Vec<f64> = r.values.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(spacing.iter().all(|s| *s == spacing[0]));
        assert_eq!(r.values[0], 0.0);
        assert!(*r.values.last().unwrap() >= 100.0 - 2.0 * spacing[0]);
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..57)
            .map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0)
            .collect();
        let mut all = Moments::default();
        xs.iter().for_each(|x| all.push(*x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..20].iter().for_each(|x| a.push(*x));
        xs[20..].iter().for_each(|x| b.push(*x));
        a.merge(&b);
        assert_eq!(a.count, all.count);
        assert!((a.mean - all.mean).abs() < 1e-14);
        assert!((a.m2 - all.m2).abs() < 1e-12);
    }

    #[test]
    fn batch_stderr_accounts_for_autocorrelation() {
        // AR(1) with phi = 0.9: the mean's variance is (1 + phi) / (1 - phi)
        // = 19 times the iid value.
        let phi = 0.9f64;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let len = 320_000u64;
        let mut m = BatchedMoments::new(len / BATCHES_PER_REPLICA);
        let mut x = 0.0;
        for _ in 0..len {
            let z: f64 = StandardNormal.sample(&mut rng);
            x = phi * x + z;
            m.push(x);
        }
        let stat = m.stat();
        let naive = m.all.naive_stderr();
        let ratio = stat.stderr / naive;
        assert!(
            (ratio - 19f64.sqrt()).abs() < 0.3 * 19f64.sqrt(),
            "ratio {ratio}"
        );
        assert_eq!(stat.count, len);
    }

    #[test]
    fn simulate_counts_and_normalization() {
        let spec = zipfian(5);
        let mut cfg = SimulationConfig::new(1e-3, 100, 1000, 3)
            .with_replicas(3)
            .with_stride(7);
        cfg.reservoir_capacity = 30;
        cfg.reservoir_stride = 10;
        let s = simulate(&spec, &cfg).unwrap();
        let expect = 3 * 1000u64.div_ceil(7);
        assert!(s.gaps.iter().all(|g| g.count == expect));
        assert!(s.weights.iter().all(|g| g.count == expect));
        let returns: u64 = s.returns.iter().map(|r| r.count).sum();
        assert_eq!(returns, expect * 5);
        let total: f64 = s.weights.iter().map(|w| w.mean).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(s.weights.windows(2).all(|w| w[0].mean >= w[1].mean));
        assert!(s.gap_samples.iter().all(|g| !g.is_empty() && g.len() <= 30));
        assert!(s.gap_samples.iter().flatten().all(|g| *g >= 0.0));
    }

    #[test]
    fn ranked_weights_sum_to_one_along_path() {
        let spec = zipfian(12);
        let mut p = Path::new(&spec, &SimulationConfig::new(1e-2, 1, 1, 11), 0).unwrap();
        for _ in 0..2000 {
            p.advance().unwrap();
            let w = p.state().ranked_weights();
            let total: f64 = w.as_slice().iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            assert!(w.as_slice().windows(2).all(|x| x[0] >= x[1]));
        }
    }

    #[test]
    fn gamma_shift_leaves_weights_unchanged() {
        let spec = zipfian(8);
        let cfg = SimulationConfig::new(1e-3, 1, 1, 5);
        let mut a = Path::new(&spec, &cfg, 0).unwrap();
        let mut b = Path::new(&spec.clone().with_gamma(0.07), &cfg, 0).unwrap();
        for _ in 0..20_000 {
            a.advance().unwrap();
            b.advance().unwrap();
            assert_eq!(a.state().rank_of(), b.state().rank_of());
            let (wa, wb) = (a.state().ranked_weights(), b.state().ranked_weights());
            for (x, y) in wa.as_slice().iter().zip(wb.as_slice()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relabeling_names_preserves_ranked_paths() {
        let spec = ModelSpec::generalized(0.5, vec![0.8, 0.9, 1.0, 1.1, 1.2, 1.3]);
        let n = 6;
        let perm = [3usize, 0, 5, 1, 4, 2];
        let initial = initial_log_values(n, 2.0);
        let rngs: Vec<_> = (0..n).map(|i| name_stream(21, 0, i)).collect();
        let mut relabeled_initial = vec![0.0; n];
        let mut relabeled_rngs = rngs.clone();
        for (i, &p) in perm.iter().enumerate() {
            relabeled_initial[p] = initial[i];
            relabeled_rngs[p] = rngs[i].clone();
        }
        let mut a = Path::from_parts(&spec, 1e-3, initial, rngs).unwrap();
        let mut b = Path::from_parts(&spec, 1e-3, relabeled_initial, relabeled_rngs).unwrap();
        for _ in 0..5000 {
            a.advance().unwrap();
            b.advance().unwrap();
            assert_eq!(a.state().ranked_log_values(), b.state().ranked_log_values());
            for (i, &p) in perm.iter().enumerate() {
                assert_eq!(a.state().rank_of()[i], b.state().rank_of()[p]);
            }
        }
    }

    #[test]
    fn transition_report_bookkeeping() {
        let spec = zipfian(10);
        let cfg = SimulationConfig::new(1e-3, 1000, 5000, 1);
        let r = rank_transition_counts(&spec, &cfg).unwrap();
        assert_eq!(r.steps, 5000);
        assert_eq!(r.jump_histogram.iter().sum::<u64>(), 5000);
        let name_steps: u64 = r.transitions.iter().flatten().sum();
        assert_eq!(name_steps, 5000 * 10);

        let coarse = SimulationConfig::new(1.0, 10, 2000, 1);
        let r = rank_transition_counts(&spec, &coarse).unwrap();
        assert!(r.multi_rank_fraction > 0.01);
        assert!(r
            .flags
            .iter()
            .any(|f| f.contains("multi-rank jumps exceed 1%")));
    }

    #[test]
    fn finer_steps_change_rank_less_often() {
        let spec = zipfian(10);
        let frac = |dt: f64| {
            let cfg = SimulationConfig::new(dt, 2000, 20_000, 4);
            rank_transition_counts(&spec, &cfg)
                .unwrap()
                .any_change_fraction
        };
        let (coarse, mid, fine) = (frac(1e-2), frac(1e-3), frac(1e-4));
        assert!(coarse > mid && mid > fine, "{coarse} {mid} {fine}");
    }

    #[test]
    fn config_validation() {
        let spec = zipfian(4);
        let mut cfg = SimulationConfig::new(0.0, 1, 1, 0);
        assert!(simulate(&spec, &cfg).is_err());
        cfg.dt = 1e-3;
        cfg.replicas = 0;
        assert!(simulate(&spec, &cfg).is_err());
        let mut cfg = SimulationConfig::new(1e-3, 1, 1, 0);
        cfg.reservoir_capacity = usize::MAX / 64;
        assert!(matches!(cfg.validate(4), Err(Error::InvalidConfig(_))));
        cfg.reservoir_capacity = 0;
        assert!(cfg.validate(4).is_ok());
        let json = r#"{"dt":0.001,"burn_in_steps":10,"sample_steps":10,"seed":1,"bogus":2}"#;
        assert!(serde_json::from_str::<SimulationConfig>(json).is_err());
    }
}
