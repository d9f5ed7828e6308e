//! Command-line front end. Every command writes its outputs plus a
//! `manifest.json` describing the run into the output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::analytics::{self, SlopeMode, WeightMeans};
use crate::calibration::{self, CalibrationResult};
use crate::error::{Error, Result};
use crate::estimators::{self, DistributionCurve};
use crate::model::{ModelSpec, RankedWeights};
use crate::simulator::{self, SimulationConfig};
use crate::size_effect;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ZIPF_ATLAS_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "zipf-atlas",
    version,
    about = "Rank-based Atlas models and Zipf's law"
)]
struct Cli {
    /// Output directory [default: $ZIPF_ATLAS_OUT or .]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap on worker threads for replica simulation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form gaps, slopes, Pareto parameter and Zipf classification.
    Analyze { spec: PathBuf },
    /// Steady-state simulation to gaps.csv, weights.csv and returns.csv.
    Simulate {
        spec: PathBuf,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Distribution curve from a ranked-size CSV or from a simulation.
    Curve {
        /// CSV with `rank,size` or `size` columns.
        #[arg(long, conflicts_with = "spec")]
        weights: Option<PathBuf>,
        /// Model spec to simulate.
        #[arg(long, required_unless_present = "weights")]
        spec: Option<PathBuf>,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Fit a model to a ranked-size CSV.
    Calibrate {
        #[arg(long = "from")]
        from: PathBuf,
        #[arg(long, value_enum)]
        family: Family,
        /// Common reversion rate (generalized family).
        #[arg(long)]
        g: Option<f64>,
        /// Seed sigma_1^2 (generalized family).
        #[arg(long = "sigma1sq")]
        sigma1_sq: Option<f64>,
        /// Per-rank volatilities (first-order family) [default: all 1].
        #[arg(long)]
        sigmas: Option<PathBuf>,
    },
    /// Simulated vs. expected rank-conditioned returns.
    SizeEffect {
        spec: PathBuf,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Reversion rate making a generalized model weakly Zipfian.
    SolveG {
        #[arg(long)]
        sigmas: PathBuf,
        #[arg(long, value_enum, default_value_t = Oracle::Surrogate)]
        oracle: Oracle,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Rank-change frequencies per step, to judge whether dt is small enough.
    Transitions {
        spec: PathBuf,
        #[command(flatten)]
        sim: SimFlags,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Family {
    #[value(name = "first_order")]
    FirstOrder,
    Generalized,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Oracle {
    Surrogate,
    Simulate,
}

#[derive(Debug, Clone, Args)]
struct SimFlags {
    /// JSON simulation config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "burn-in")]
    burn_in: Option<u64>,
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    stride: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Master seed; drawn at random and recorded when omitted.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    initial_spread: Option<f64>,
    #[arg(long)]
    reservoir: Option<usize>,
    #[arg(long)]
    reservoir_stride: Option<u64>,
}

impl SimFlags {
    fn resolve(&self) -> Result<SimulationConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
            None => SimulationConfig::new(
                1e-3,
                100_000,
                100_000,
                self.seed.unwrap_or_else(rand::random),
            ),
        };
        if let Some(v) = self.dt {
            cfg.dt = v;
        }
        if let Some(v) = self.burn_in {
            cfg.burn_in_steps = v;
        }
        if let Some(v) = self.samples {
            cfg.sample_steps = v;
        }
        if let Some(v) = self.stride {
            cfg.sample_stride = v;
        }
        if let Some(v) = self.replicas {
            cfg.replicas = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.initial_spread.is_some() {
            cfg.initial_spread = self.initial_spread;
        }
        if let Some(v) = self.reservoir {
            cfg.reservoir_capacity = v;
        }
        if let Some(v) = self.reservoir_stride {
            cfg.reservoir_stride = v;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

/// Collects output files of one run.
struct Run {
    dir: PathBuf,
    outputs: Vec<String>,
    config: Value,
    seed: Option<u64>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    fn record_files(&mut self, paths: &[PathBuf]) {
        for p in paths {
            if let Some(name) = p.file_name() {
                self.outputs.push(name.to_string_lossy().into_owned());
            }
        }
    }

    fn finish(mut self, command: &str, started: Instant) -> Result<()> {
        self.outputs.push(MANIFEST_FILE.to_string());
        let manifest = RunManifest {
            command: command.to_string(),
            config: self.config,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: self.outputs,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        let tmp = self.dir.join(format!(".{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::rename(&tmp, self.dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}

fn read_spec(path: &Path) -> Result<ModelSpec> {
    let spec = ModelSpec::from_json(&fs::read_to_string(path)?)?;
    spec.ensure_valid()?;
    Ok(spec)
}

/// Volatilities from a JSON array or whitespace/comma separated numbers.
fn read_sigmas(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("cannot parse sigma {t:?}")))
        })
        .collect()
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Infeasible(_) => 2,
        Error::NumericalFailure { .. } => 3,
        _ => 1,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        // Fails only if a global pool already exists, e.g. a second run in
        // the same process; the existing pool is then reused.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    let dir = cli
        .out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let started = Instant::now();
    let mut run = Run {
        dir,
        outputs: Vec::new(),
        config: Value::Null,
        seed: None,
    };

    let (name, outcome) = match cli.command {
        Command::Analyze { spec } => ("analyze", analyze(&mut run, &spec)),
        Command::Simulate { spec, sim } => ("simulate", simulate(&mut run, &spec, &sim)),
        Command::Curve {
            weights,
            spec,
            k_min,
            k_max,
            sim,
        } => (
            "curve",
            curve(
                &mut run,
                weights.as_deref(),
                spec.as_deref(),
                k_min,
                k_max,
                &sim,
            ),
        ),
        Command::Calibrate {
            from,
            family,
            g,
            sigma1_sq,
            sigmas,
        } => (
            "calibrate",
            calibrate(&mut run, &from, family, g, sigma1_sq, sigmas.as_deref()),
        ),
        Command::SizeEffect { spec, sim } => ("size-effect", size_effect(&mut run, &spec, &sim)),
        Command::SolveG {
            sigmas,
            oracle,
            max_iter,
            tol,
            sim,
        } => (
            "solve-g",
            solve_g(&mut run, &sigmas, oracle, max_iter, tol, &sim),
        ),
        Command::Transitions { spec, sim } => ("transitions", transitions(&mut run, &spec, &sim)),
    };
    run.finish(name, started)?;
    outcome
}

fn analyze(run: &mut Run, spec_path: &Path) -> Result<()> {
    let spec = read_spec(spec_path)?;
    run.config = json!({ "spec": spec });
    let n = spec.n();
    let gaps: Vec<Value> = (1..n)
        .map(|k| -> Result<Value> {
            Ok(json!({ "rank": k, "expected_log_gap": analytics::expected_log_gap(&spec, k)? }))
        })
        .collect::<Result<_>>()?;
    let slopes: Vec<Value> = (1..n)
        .map(|k| -> Result<Value> {
            Ok(json!({
                "rank": k,
                "exact": analytics::tangent_slope(&spec, k, SlopeMode::Exact)?,
                "asymptotic": analytics::tangent_slope(&spec, k, SlopeMode::Asymptotic)?,
            }))
        })
        .collect::<Result<_>>()?;
    let pareto = match spec {
        ModelSpec::StandardAtlas { .. } => Some(analytics::pareto_parameter(&spec)?),
        _ => None,
    };
    let (classification, note) = match analytics::zipf_classify(&spec, WeightMeans::Surrogate) {
        Ok(c) => (Some(c), None),
        Err(e @ Error::UnsupportedVariant { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let report = json!({
        "spec": spec,
        "validation": spec.validate(),
        "gaps": gaps,
        "slopes": slopes,
        "pareto_parameter": pareto,
        "classification": classification,
        "classification_note": note,
        "expected_log_weights": analytics::expected_log_weights(&spec)?,
    });
    run.write_json("analysis.json", &report)
}

fn sim_config(run: &mut Run, spec: &ModelSpec, sim: &SimFlags) -> Result<SimulationConfig> {
    let cfg = sim.resolve()?;
    run.seed = Some(cfg.seed);
    run.config = json!({ "spec": spec, "simulation": cfg });
    Ok(cfg)
}

fn simulate(run: &mut Run, spec_path: &Path, sim: &SimFlags) -> Result<()> {
    let spec = read_spec(spec_path)?;
    let cfg = sim_config(run, &spec, sim)?;
    let sample = simulator::simulate(&spec, &cfg)?;
    let files = sample.write_csvs(&run.dir)?;
    run.record_files(&files);
    Ok(())
}

fn curve(
    run: &mut Run,
    weights: Option<&Path>,
    spec: Option<&Path>,
    k_min: Option<usize>,
    k_max: Option<usize>,
    sim: &SimFlags,
) -> Result<()> {
    let weights: RankedWeights = match (weights, spec) {
        (Some(path), _) => {
            run.config = json!({ "weights": path });
            let data = calibration::ingest_ranked_csv(fs::File::open(path)?)?;
            data.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            data.weights
        }
        (None, Some(path)) => {
            let spec = read_spec(path)?;
            let cfg = sim_config(run, &spec, sim)?;
            simulator::simulate(&spec, &cfg)?.weight_means()?
        }
        (None, None) => return Err(Error::InvalidInput("need --weights or --spec".into())),
    };
    let curve: DistributionCurve = estimators::distribution_curve(&weights);
    let (lo, hi) = estimators::default_fit_band(curve.n());
    let fit = estimators::fit_slope(&curve, k_min.unwrap_or(lo), k_max.unwrap_or(hi))?;
    let path = run.path("curve.csv");
    curve.write_csv(&path)?;
    run.write_json("curve_fit.json", &fit)
}

#[derive(Serialize)]
struct CalibrationReport<'a> {
    family: &'a str,
    source: &'a Path,
    warnings: &'a [String],
    result: Option<&'a CalibrationResult>,
    infeasibility: Option<&'a calibration::Infeasibility>,
}

fn calibrate(
    run: &mut Run,
    from: &Path,
    family: Family,
    g: Option<f64>,
    sigma1_sq: Option<f64>,
    sigmas: Option<&Path>,
) -> Result<()> {
    let data = calibration::ingest_ranked_csv(fs::File::open(from)?)?;
    data.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
    let n = data.sizes.len();
    let (family_name, outcome) = match family {
        Family::FirstOrder => {
            let sigmas = match sigmas {
                Some(p) => read_sigmas(p)?,
                None => vec![1.0; n],
            };
            run.config = json!({ "from": from, "family": "first_order", "sigmas": sigmas });
            (
                "first_order",
                calibration::calibrate_first_order(&data.target_gaps, &sigmas),
            )
        }
        Family::Generalized => {
            let g = g.ok_or_else(|| {
                Error::InvalidInput("--g is required for the generalized family".into())
            })?;
            let seed =
                sigma1_sq.unwrap_or_else(|| calibration::default_sigma1_sq(&data.target_gaps, g));
            run.config =
                json!({ "from": from, "family": "generalized", "g": g, "sigma1_sq": seed });
            (
                "generalized",
                calibration::calibrate_generalized(&data.target_gaps, g, seed),
            )
        }
    };

    let (result, infeasibility) = match &outcome {
        Ok(r) => (Some(r), None),
        Err(Error::Infeasible(inf)) => (None, Some(inf.as_ref())),
        Err(_) => (None, None),
    };
    if result.is_some() || infeasibility.is_some() {
        run.write_json(
            "calibration_report.json",
            &CalibrationReport {
                family: family_name,
                source: from,
                warnings: &data.warnings,
                result,
                infeasibility,
            },
        )?;
    }
    let result = outcome?;
    let path = run.path("fitted_spec.json");
    fs::write(path, result.spec.to_json_pretty() + "\n")?;
    Ok(())
}

fn size_effect(run: &mut Run, spec_path: &Path, sim: &SimFlags) -> Result<()> {
    let spec = read_spec(spec_path)?;
    let cfg = sim_config(run, &spec, sim)?;
    let (table, _) = size_effect::size_effect_experiment(&spec, &cfg)?;
    for row in table.rows.iter().filter(|r| r.flagged) {
        eprintln!(
            "warning: rank {} deviates from the expected return (z = {:.2})",
            row.rank, row.z
        );
    }
    let path = run.path("size_effect.csv");
    table.write_csv(&path)
}

fn solve_g(
    run: &mut Run,
    sigmas_path: &Path,
    oracle: Oracle,
    max_iter: usize,
    tol: f64,
    sim: &SimFlags,
) -> Result<()> {
    let sigmas = read_sigmas(sigmas_path)?;
    let solution = match oracle {
        Oracle::Surrogate => {
            run.config =
                json!({ "sigmas": sigmas, "oracle": oracle, "max_iter": max_iter, "tol": tol });
            analytics::solve_weak_zipf_g(
                &sigmas,
                analytics::surrogate_oracle(&sigmas),
                max_iter,
                tol,
            )?
        }
        Oracle::Simulate => {
            let cfg = sim.resolve()?;
            run.seed = Some(cfg.seed);
            run.config = json!({
                "sigmas": sigmas, "oracle": oracle, "max_iter": max_iter, "tol": tol,
                "simulation": cfg,
            });
            let oracle = |g: f64| {
                simulator::simulate(&ModelSpec::generalized(g, sigmas.clone()), &cfg)?
                    .weight_means()
            };
            analytics::solve_weak_zipf_g(&sigmas, oracle, max_iter, tol)?
        }
    };
    if !solution.converged {
        eprintln!(
            "warning: no convergence after {} iterations; best residual {}",
            solution.iterations, solution.residual
        );
    }
    let spec = ModelSpec::generalized(solution.g, sigmas.clone());
    run.write_json(
        "solve_g.json",
        &json!({ "solution": solution, "spec": spec }),
    )
}

fn transitions(run: &mut Run, spec_path: &Path, sim: &SimFlags) -> Result<()> {
    let spec = read_spec(spec_path)?;
    let cfg = sim_config(run, &spec, sim)?;
    let report = simulator::rank_transition_counts(&spec, &cfg)?;
    for f in &report.flags {
        eprintln!("warning: {f}");
    }
    run.write_json("transitions.json", &report)
}
