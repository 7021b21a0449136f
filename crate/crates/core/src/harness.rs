//! Replicated experiments, trace output, run options and the ask/tell
//! session used to drive the optimizer against external objectives.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchfns::{lookup, BenchError, Benchmark, Sense};
use crate::domain::{ObservationSet, RngStream, RunConfig, SearchDomain};
use crate::strategies::{initial_design, propose, ModelSpace, RunError, RunHistory, Strategy};

pub const TRACE_HEADER: &str = "replicate,iteration,batch_size,cum_evaluations,best_value,wall_ms";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("replicate {replicate}: {source}")]
    Run {
        replicate: usize,
        #[source]
        source: RunError,
    },
    #[error("session: {0}")]
    Session(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Process exit code: 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Bench(BenchError::Unknown { .. }) => 2,
            _ => 1,
        }
    }
}

/// Defaults for `key` (e.g. `hartmann-3`) and `strategy`.
pub fn default_config(key: &str, strategy: Strategy) -> Result<RunConfig, HarnessError> {
    let b = lookup(key)?;
    Ok(RunConfig::new(key, b.dim, strategy))
}

/// Replicated runs of one (benchmark, strategy) pair.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: RunConfig,
    pub benchmark: Benchmark,
    /// One history per replicate, in replicate order. Values are in
    /// maximization form.
    pub histories: Vec<RunHistory>,
    /// Per-iteration median of best-so-far, length `T + 1`.
    pub median_best: Vec<f64>,
    /// Per-iteration (first, third) quartile of best-so-far.
    pub quartiles_best: Vec<(f64, f64)>,
    pub mean_total_evaluations: f64,
    /// Per-iteration mean wall time in milliseconds.
    pub mean_wall_ms: Vec<f64>,
}

impl ExperimentResult {
    pub fn final_median(&self) -> f64 {
        *self.median_best.last().expect("at least the initial record")
    }

    /// Final median best in the benchmark's native sense.
    pub fn final_median_native(&self) -> f64 {
        self.benchmark.to_native(self.final_median())
    }
}

/// Linear-interpolation quantile of an unsorted slice.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = p * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Run `config.replicates` independent replicates on up to `jobs` threads.
/// Replicate `r` uses the stream `RngStream::new(seed, 0).derive_path(&[r])`.
pub fn run_experiment(config: &RunConfig, jobs: Option<usize>) -> Result<ExperimentResult, HarnessError> {
    config.validate().map_err(HarnessError::Usage)?;
    let benchmark = lookup(&config.function)?;
    if benchmark.dim != config.dim {
        return Err(HarnessError::Usage(format!(
            "{} has dimension {}, configuration says {}",
            config.function, benchmark.dim, config.dim
        )));
    }
    let root = RngStream::new(config.seed, 0);
    let objective = |x: &[f64]| benchmark.maximization_target(x);
    let run_all = || -> Vec<Result<RunHistory, RunError>> {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| {
                crate::strategies::run_loop(
                    &objective,
                    &benchmark.domain,
                    config,
                    &root.derive_path(&[r as u64]),
                )
            })
            .collect()
    };
    let outcomes = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| HarnessError::Usage(e.to_string()))?
            .install(run_all),
        None => run_all(),
    };
    let mut histories = Vec::with_capacity(outcomes.len());
    for (replicate, h) in outcomes.into_iter().enumerate() {
        histories.push(h.map_err(|source| HarnessError::Run { replicate, source })?);
    }
    Ok(aggregate(config.clone(), benchmark, histories))
}

/// Aggregate statistics over replicate histories.
pub fn aggregate(config: RunConfig, benchmark: Benchmark, histories: Vec<RunHistory>) -> ExperimentResult {
    let steps = histories.iter().map(|h| h.records.len()).min().unwrap_or(0);
    let column = |t: usize, f: &dyn Fn(&crate::strategies::IterationRecord) -> f64| -> Vec<f64> {
        histories.iter().map(|h| f(&h.records[t])).collect()
    };
    let mut median_best = Vec::with_capacity(steps);
    let mut quartiles_best = Vec::with_capacity(steps);
    let mut mean_wall_ms = Vec::with_capacity(steps);
    for t in 0..steps {
        let best = column(t, &|r| r.best_so_far);
        median_best.push(quantile(&best, 0.5));
        quartiles_best.push((quantile(&best, 0.25), quantile(&best, 0.75)));
        let wall = column(t, &|r| r.wall_ms);
        mean_wall_ms.push(wall.iter().sum::<f64>() / wall.len() as f64);
    }
    let mean_total_evaluations = histories
        .iter()
        .map(|h| h.total_evaluations() as f64)
        .sum::<f64>()
        / histories.len().max(1) as f64;
    ExperimentResult {
        config,
        benchmark,
        histories,
        median_best,
        quartiles_best,
        mean_total_evaluations,
        mean_wall_ms,
    }
}

/// Whether measured wall times go into the trace. Recorded times differ
/// between runs, so the default writes zeros and keeps traces reproducible
/// byte for byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WallTime {
    #[default]
    Zero,
    Measured,
}

/// Render the per-iteration trace CSV.
pub fn render_traces(result: &ExperimentResult, wall: WallTime) -> String {
    let mut out = String::new();
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for (r, h) in result.histories.iter().enumerate() {
        for rec in &h.records {
            let ms = match wall {
                WallTime::Zero => 0.0,
                WallTime::Measured => rec.wall_ms,
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{:?},{:?}",
                r, rec.iteration, rec.batch_size, rec.cum_evaluations, rec.best_so_far, ms
            );
        }
    }
    out
}

pub fn write_traces(result: &ExperimentResult, path: &Path, wall: WallTime) -> Result<(), HarnessError> {
    fs::write(path, render_traces(result, wall))?;
    Ok(())
}

/// Machine-readable summary of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub function: String,
    pub strategy: Strategy,
    pub sense: Sense,
    pub config: RunConfig,
    pub optimum: f64,
    pub reported_optimum: f64,
    /// Median best-so-far per iteration, in maximization form.
    pub median_best: Vec<f64>,
    pub final_median_best: f64,
    pub final_median_best_native: f64,
    pub mean_total_evaluations: f64,
    pub mean_batch_size: f64,
    pub mean_wall_ms: Vec<f64>,
}

pub fn summarize(result: &ExperimentResult) -> Summary {
    let sizes: Vec<usize> = result.histories.iter().flat_map(|h| h.batch_sizes()).collect();
    Summary {
        function: result.config.function.clone(),
        strategy: result.config.strategy,
        sense: result.benchmark.sense,
        config: result.config.clone(),
        optimum: result.benchmark.optimum,
        reported_optimum: result.benchmark.reported_optimum,
        median_best: result.median_best.clone(),
        final_median_best: result.final_median(),
        final_median_best_native: result.final_median_native(),
        mean_total_evaluations: result.mean_total_evaluations,
        mean_batch_size: sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64,
        mean_wall_ms: result.mean_wall_ms.clone(),
    }
}

/// Write `<function>_<strategy>.csv` and `.json` into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path, wall: WallTime) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let stem = format!("{}_{}", result.config.function, result.config.strategy);
    write_traces(result, &dir.join(format!("{stem}.csv")), wall)?;
    let json = serde_json::to_string_pretty(&summarize(result))?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(())
}

/// Settings that may come from flags or from a `key=value` file. Unset
/// fields keep the benchmark defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub function: Option<String>,
    pub strategy: Option<Strategy>,
    pub iters: Option<usize>,
    pub init: Option<usize>,
    pub batch: Option<usize>,
    pub beta_sqrt: Option<f64>,
    pub gamma: Option<f64>,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub normalize: Option<bool>,
    pub standardize: Option<bool>,
    pub weight_threshold: Option<f64>,
    pub merge_fraction: Option<f64>,
    pub chains: Option<usize>,
    pub chain_length: Option<usize>,
    pub out: Option<String>,
    pub record_wall_time: Option<bool>,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| HarnessError::Usage(format!("{key}: cannot parse `{v}`: {e}")))
}

impl RunOptions {
    /// Parse a flat `key=value` file. Keys are the long flag names; blank
    /// lines and lines starting with `#` are ignored.
    pub fn from_kv(text: &str) -> Result<Self, HarnessError> {
        let mut o = RunOptions::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Usage(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "function" => o.function = Some(v.to_string()),
                "strategy" => {
                    o.strategy = Some(v.parse().map_err(|e: crate::strategies::UnknownStrategy| {
                        HarnessError::Usage(e.to_string())
                    })?)
                }
                "iters" => o.iters = Some(parse_value(k, v)?),
                "init" => o.init = Some(parse_value(k, v)?),
                "batch" => o.batch = Some(parse_value(k, v)?),
                "beta-sqrt" => o.beta_sqrt = Some(parse_value(k, v)?),
                "gamma" => o.gamma = Some(parse_value(k, v)?),
                "replicates" => o.replicates = Some(parse_value(k, v)?),
                "seed" => o.seed = Some(parse_value(k, v)?),
                "jobs" => o.jobs = Some(parse_value(k, v)?),
                "normalize" => o.normalize = Some(parse_value(k, v)?),
                "standardize" => o.standardize = Some(parse_value(k, v)?),
                "weight-threshold" => o.weight_threshold = Some(parse_value(k, v)?),
                "merge-fraction" => o.merge_fraction = Some(parse_value(k, v)?),
                "chains" => o.chains = Some(parse_value(k, v)?),
                "chain-length" => o.chain_length = Some(parse_value(k, v)?),
                "out" => o.out = Some(v.to_string()),
                "record-wall-time" => o.record_wall_time = Some(parse_value(k, v)?),
                _ => return Err(HarnessError::Usage(format!("line {}: unknown key `{k}`", n + 1))),
            }
        }
        Ok(o)
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overridden_by(self, over: RunOptions) -> RunOptions {
        RunOptions {
            function: over.function.or(self.function),
            strategy: over.strategy.or(self.strategy),
            iters: over.iters.or(self.iters),
            init: over.init.or(self.init),
            batch: over.batch.or(self.batch),
            beta_sqrt: over.beta_sqrt.or(self.beta_sqrt),
            gamma: over.gamma.or(self.gamma),
            replicates: over.replicates.or(self.replicates),
            seed: over.seed.or(self.seed),
            jobs: over.jobs.or(self.jobs),
            normalize: over.normalize.or(self.normalize),
            standardize: over.standardize.or(self.standardize),
            weight_threshold: over.weight_threshold.or(self.weight_threshold),
            merge_fraction: over.merge_fraction.or(self.merge_fraction),
            chains: over.chains.or(self.chains),
            chain_length: over.chain_length.or(self.chain_length),
            out: over.out.or(self.out),
            record_wall_time: over.record_wall_time.or(self.record_wall_time),
        }
    }

    /// Benchmark defaults with every set field applied.
    pub fn to_config(&self) -> Result<RunConfig, HarnessError> {
        let function = self
            .function
            .as_deref()
            .ok_or_else(|| HarnessError::Usage("missing --function".into()))?;
        let strategy = self
            .strategy
            .ok_or_else(|| HarnessError::Usage("missing --strategy".into()))?;
        let mut c = default_config(function, strategy)?;
        self.apply(&mut c);
        c.validate().map_err(HarnessError::Usage)?;
        Ok(c)
    }

    fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = self.iters {
            c.iterations = v;
        }
        if let Some(v) = self.init {
            c.initial_points = v;
        }
        if let Some(v) = self.batch {
            c.batch_size = v;
        }
        if let Some(v) = self.beta_sqrt {
            c.beta_sqrt = v;
        }
        if let Some(v) = self.gamma {
            c.kernel_gamma = v;
        }
        if let Some(v) = self.replicates {
            c.replicates = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.normalize {
            c.normalize = v;
        }
        if let Some(v) = self.standardize {
            c.standardize = v;
        }
        if let Some(v) = self.weight_threshold {
            c.weight_threshold = v;
        }
        if let Some(v) = self.merge_fraction {
            c.merge_fraction = v;
        }
        if let Some(v) = self.chains {
            c.chains = v;
        }
        if let Some(v) = self.chain_length {
            c.chain_length = v;
        }
    }
}

/// State of an ask/tell session, stored as JSON between commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub config: RunConfig,
    pub domain: SearchDomain,
    /// Outcomes told to the session are minimized when `Min`.
    pub sense: Sense,
    /// Observations in maximization form.
    pub observations: ObservationSet,
    pub iteration: usize,
    pub pending: Option<Vec<Vec<f64>>>,
}

impl Session {
    pub fn new(config: RunConfig, domain: SearchDomain, sense: Sense) -> Result<Self, HarnessError> {
        config.validate().map_err(HarnessError::Usage)?;
        if domain.dim() != config.dim {
            return Err(HarnessError::Usage(format!(
                "domain has dimension {}, configuration {}",
                domain.dim(),
                config.dim
            )));
        }
        Ok(Self {
            observations: ObservationSet::new(domain.dim()),
            config,
            domain,
            sense,
            iteration: 0,
            pending: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Next batch. Until the initial design is complete this is the rest of
    /// the uniform design; afterwards the configured strategy proposes.
    pub fn ask(&mut self) -> Result<Vec<Vec<f64>>, HarnessError> {
        if self.pending.is_some() {
            return Err(HarnessError::Session(
                "previous batch is still pending; tell its outcomes first".into(),
            ));
        }
        let root = RngStream::new(self.config.seed, 0);
        let have = self.observations.len();
        let points = if have < self.config.initial_points {
            let design = initial_design(&self.domain, self.config.initial_points, &mut root.derive(0));
            design[have..].to_vec()
        } else {
            let space = ModelSpace::new(self.domain.clone(), self.config.normalize, self.config.standardize);
            let proposal = propose(
                self.config.strategy,
                &space.data(&self.observations),
                &space.domain(),
                &self.config,
                &root.derive(self.iteration as u64 + 1),
            )
            .map_err(|e| HarnessError::Session(e.to_string()))?;
            proposal.points.iter().map(|x| space.to_native(x)).collect()
        };
        self.pending = Some(points.clone());
        Ok(points)
    }

    /// Record outcomes for the pending batch, in the order it was asked.
    pub fn tell(&mut self, outcomes: &[f64]) -> Result<(), HarnessError> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| HarnessError::Session("no pending batch; ask first".into()))?;
        if pending.len() != outcomes.len() {
            let n = pending.len();
            self.pending = Some(pending);
            return Err(HarnessError::Session(format!(
                "{} outcomes for {} pending points",
                outcomes.len(),
                n
            )));
        }
        for (x, y) in pending.into_iter().zip(outcomes) {
            let y = match self.sense {
                Sense::Min => -y,
                Sense::Max => *y,
            };
            self.observations
                .push(x, y)
                .map_err(|e| HarnessError::Session(e.to_string()))?;
        }
        self.iteration += 1;
        Ok(())
    }
}

/// Points as CSV rows, one per line.
pub fn points_csv(points: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for p in points {
        let row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_matches_sorted_oracle() {
        let v = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
    }

    #[test]
    fn kv_parsing_and_override() {
        let file = RunOptions::from_kv("# comment\nfunction = forrester-1\nstrategy=ucb\niters=4\nseed=9\n").unwrap();
        let flags = RunOptions {
            iters: Some(2),
            ..Default::default()
        };
        let c = file.overridden_by(flags).to_config().unwrap();
        assert_eq!(c.iterations, 2);
        assert_eq!(c.seed, 9);
        assert_eq!(c.strategy, Strategy::Ucb);
        assert!(RunOptions::from_kv("bogus=1").is_err());
        assert!(RunOptions::from_kv("iters=x").is_err());
    }

    #[test]
    fn unknown_names_are_usage_errors() {
        let err = default_config("nope-3", Strategy::Ucb).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("hartmann-3"));
    }

    #[test]
    fn session_protocol() {
        let cfg = default_config("forrester-1", Strategy::Ucb).unwrap();
        let b = lookup("forrester-1").unwrap();
        let mut s = Session::new(cfg, b.domain.clone(), Sense::Min).unwrap();
        assert!(s.tell(&[1.0]).is_err());
        let p = s.ask().unwrap();
        assert_eq!(p.len(), 3);
        assert!(s.ask().is_err());
        assert!(s.tell(&[1.0]).is_err());
        let ys: Vec<f64> = p.iter().map(|x| b.evaluate(x).unwrap()).collect();
        s.tell(&ys).unwrap();
        assert_eq!(s.iteration, 1);
        let mut replay = s.clone();
        let next = s.ask().unwrap();
        assert_eq!(next.len(), 1);
        assert_eq!(replay.ask().unwrap(), next);
        s.tell(&[b.evaluate(&next[0]).unwrap()]).unwrap();
        assert_eq!(s.iteration, 2);
    }
}
