//! Batch proposal strategies and the outer optimization loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{
    acq_value, find_max, find_min, maximize, minimize, AcquisitionKind, AcquisitionSpec,
    SearchSettings,
};
use crate::bgss::{bgss, SamplerConfig, SamplerError};
use crate::domain::{ObservationSet, RngStream, RunConfig, SearchDomain, UnitSource};
use crate::gp::{fit_with_retry, GpError, GpPosterior, KernelParams, Surrogate};
use crate::igmm::{extract_peaks, fit_igmm, IgmmError, IgmmPrior};

/// Jitter doublings tried before a GP fit is given up.
pub const FIT_RETRIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "b3o")]
    B3o,
    #[serde(rename = "ei")]
    Ei,
    #[serde(rename = "ucb")]
    Ucb,
    #[serde(rename = "rand-ei")]
    RandEi,
    #[serde(rename = "rand-ucb")]
    RandUcb,
    #[serde(rename = "cl-ei")]
    ClEi,
    #[serde(rename = "cl-ucb")]
    ClUcb,
    #[serde(rename = "bucb")]
    Bucb,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::B3o,
        Strategy::Ei,
        Strategy::Ucb,
        Strategy::RandEi,
        Strategy::RandUcb,
        Strategy::ClEi,
        Strategy::ClUcb,
        Strategy::Bucb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::B3o => "b3o",
            Strategy::Ei => "ei",
            Strategy::Ucb => "ucb",
            Strategy::RandEi => "rand-ei",
            Strategy::RandUcb => "rand-ucb",
            Strategy::ClEi => "cl-ei",
            Strategy::ClUcb => "cl-ucb",
            Strategy::Bucb => "bucb",
        }
    }

    /// Acquisition the strategy maximizes.
    pub fn acquisition(self) -> AcquisitionKind {
        match self {
            Strategy::Ei | Strategy::RandEi | Strategy::ClEi => AcquisitionKind::Ei,
            _ => AcquisitionKind::Ucb,
        }
    }

    /// Whether the strategy proposes a fixed-size batch of `q` points.
    pub fn is_fixed_batch(self) -> bool {
        !matches!(self, Strategy::B3o | Strategy::Ei | Strategy::Ucb)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown strategy `{0}` (valid: b3o, ei, ucb, rand-ei, rand-ucb, cl-ei, cl-ucb, bucb)")]
pub struct UnknownStrategy(pub String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Igmm(#[from] IgmmError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("batch size must be at least 1")]
    EmptyBatch,
}

/// Where a proposed point came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PointTag {
    /// Mixture weight of the peak the point sits on.
    PeakWeight(f64),
    /// Position within a fixed-size batch.
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProposal {
    pub points: Vec<Vec<f64>>,
    pub tags: Vec<PointTag>,
    /// Set when the strategy degraded to a single sequential point.
    pub fallback: Option<String>,
}

impl BatchProposal {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn single(point: Vec<f64>) -> Self {
        Self {
            points: vec![point],
            tags: vec![PointTag::Slot(0)],
            fallback: None,
        }
    }
}

/// Knobs of the sample-then-cluster batch proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct B3oSettings {
    pub sampler: SamplerConfig,
    pub prior: IgmmPrior,
    pub tol: f64,
    pub max_sweeps: usize,
    pub weight_threshold: f64,
    /// Merge distance as a fraction of the domain diagonal.
    pub merge_fraction: f64,
}

impl Default for B3oSettings {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            prior: IgmmPrior::default(),
            tol: 1e-5,
            max_sweeps: 200,
            weight_threshold: 0.15,
            merge_fraction: 0.01,
        }
    }
}

impl B3oSettings {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            sampler: SamplerConfig {
                chains: config.chains,
                max_iter: config.chain_length,
                ..SamplerConfig::default()
            },
            weight_threshold: config.weight_threshold,
            merge_fraction: config.merge_fraction,
            ..Self::default()
        }
    }
}

// Sub-stream tags used by the proposers. Every proposer locates its first
// point with `find_max` on `FIND_MAX`, which is what makes the q = 1
// reductions coincide with the sequential proposal.
const FIND_MAX: u64 = 0;
const FIND_MIN: u64 = 1;
const SAMPLER: u64 = 2;
const MIXTURE: u64 = 3;
const UNIFORM_TAIL: u64 = 4;

/// Slice-sample the surface above `floor`, fit the mixture and return its
/// peaks. `Ok(Err(reason))` means the sampler came back too thin.
fn sample_and_cluster<F>(
    acq: &F,
    floor: f64,
    domain: &SearchDomain,
    settings: &B3oSettings,
    rng: &RngStream,
) -> Result<Result<BatchProposal, String>, StrategyError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let samples = match bgss(acq, domain, floor, &settings.sampler, &rng.derive(SAMPLER)) {
        Ok(s) => s,
        Err(SamplerError::TooFewSamples { got, needed }) => {
            return Ok(Err(format!("sampler returned {got} of {needed} points")))
        }
        Err(e) => return Err(e.into()),
    };
    let post = fit_igmm(
        &samples,
        &settings.prior,
        settings.tol,
        settings.max_sweeps,
        &mut rng.derive(MIXTURE),
    )?;
    let peaks = extract_peaks(
        &post,
        domain,
        settings.weight_threshold,
        settings.merge_fraction * domain.diagonal(),
    );
    Ok(Ok(BatchProposal {
        tags: peaks.weights.iter().map(|w| PointTag::PeakWeight(*w)).collect(),
        points: peaks.means,
        fallback: None,
    }))
}

fn with_fallback(reason: String, point: Vec<f64>) -> BatchProposal {
    let mut p = BatchProposal::single(point);
    p.fallback = Some(reason);
    p
}

/// Sample points with density proportional to the acquisition surface,
/// fit the mixture and return its peaks as the batch. Works on any surface;
/// see [`propose_b3o`] for the GP-backed version.
pub fn propose_b3o_surface<F>(
    acq: &F,
    domain: &SearchDomain,
    settings: &B3oSettings,
    rng: &RngStream,
) -> Result<BatchProposal, StrategyError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let search = SearchSettings::default();
    let floor = minimize(acq, domain, &mut rng.derive(FIND_MIN), &search);
    match sample_and_cluster(acq, floor.value, domain, settings, rng)? {
        Ok(p) => Ok(p),
        Err(reason) => {
            let best = maximize(acq, domain, &mut rng.derive(FIND_MAX), &search);
            Ok(with_fallback(reason, best.location))
        }
    }
}

/// Batch of variable size from the peaks of the acquisition surface.
/// Degrades to the single acquisition maximizer when the sampler cannot
/// produce enough points.
pub fn propose_b3o<S: Surrogate>(
    gp: &S,
    spec: &AcquisitionSpec,
    domain: &SearchDomain,
    settings: &B3oSettings,
    rng: &RngStream,
) -> Result<BatchProposal, StrategyError> {
    let floor = find_min(spec, gp, domain, &mut rng.derive(FIND_MIN))?;
    // Points where the surface cannot be computed never enter a slice.
    let acq = |x: &[f64]| acq_value(spec, gp, x).unwrap_or(f64::NEG_INFINITY);
    match sample_and_cluster(&acq, floor.value, domain, settings, rng)? {
        Ok(p) => Ok(p),
        Err(reason) => {
            let best = find_max(spec, gp, domain, &mut rng.derive(FIND_MAX))?;
            Ok(with_fallback(reason, best.location))
        }
    }
}

/// The single acquisition maximizer.
pub fn propose_sequential<S: Surrogate + ?Sized>(
    gp: &S,
    spec: &AcquisitionSpec,
    domain: &SearchDomain,
    rng: &RngStream,
) -> Result<BatchProposal, StrategyError> {
    let best = find_max(spec, gp, domain, &mut rng.derive(FIND_MAX))?;
    Ok(BatchProposal::single(best.location))
}

/// Acquisition maximizer followed by `q - 1` uniform points.
pub fn propose_random_batch<S: Surrogate + ?Sized>(
    gp: &S,
    spec: &AcquisitionSpec,
    domain: &SearchDomain,
    q: usize,
    rng: &RngStream,
) -> Result<BatchProposal, StrategyError> {
    if q == 0 {
        return Err(StrategyError::EmptyBatch);
    }
    let mut p = propose_sequential(gp, spec, domain, rng)?;
    let mut tail = rng.derive(UNIFORM_TAIL);
    for j in 1..q {
        p.points.push(domain.uniform_point(&mut tail));
        p.tags.push(PointTag::Slot(j));
    }
    Ok(p)
}

/// Greedy batch that pretends each chosen point returned the GP mean there.
///
/// `data` must be the observations `gp` was fitted on. For EI the incumbent
/// is recomputed from the augmented data after every lie.
pub fn propose_constant_liar(
    data: &ObservationSet,
    gp: &GpPosterior,
    spec: &AcquisitionSpec,
    domain: &SearchDomain,
    q: usize,
    rng: &RngStream,
) -> Result<BatchProposal, StrategyError> {
    if q == 0 {
        return Err(StrategyError::EmptyBatch);
    }
    let first = find_max(spec, gp, domain, &mut rng.derive(FIND_MAX))?.location;
    let mut out = BatchProposal::single(first);
    if q == 1 {
        return Ok(out);
    }
    let mut augmented = data.clone();
    let mut current = gp.clone();
    let mut current_spec = *spec;
    for j in 1..q {
        let x = out.points[j - 1].clone();
        let lie = current.predict(&x)?.mean;
        augmented
            .push(x, lie)
            .map_err(|_| GpError::NonFinite)?;
        current = fit_with_retry(&augmented, current.params(), FIT_RETRIES)?.0;
        if spec.kind != AcquisitionKind::Ucb {
            current_spec = AcquisitionSpec::for_data(spec.kind, &augmented, spec.beta_sqrt);
        }
        let next = find_max(&current_spec, &current, domain, &mut rng.derive(FIND_MAX + j as u64))?;
        out.points.push(next.location);
        out.tags.push(PointTag::Slot(j));
    }
    Ok(out)
}

/// Greedy UCB batch that shrinks the variance at each chosen point before
/// choosing the next one.
pub fn propose_bucb(
    gp: &GpPosterior,
    domain: &SearchDomain,
    q: usize,
    beta_sqrt: f64,
    rng: &RngStream,
) -> Result<BatchProposal, StrategyError> {
    if q == 0 {
        return Err(StrategyError::EmptyBatch);
    }
    let spec = AcquisitionSpec::ucb(beta_sqrt);
    let first = find_max(&spec, gp, domain, &mut rng.derive(FIND_MAX))?.location;
    let mut out = BatchProposal::single(first);
    let mut current = gp.clone();
    for j in 1..q {
        current = current.hallucinate(&out.points[j - 1])?;
        let next = find_max(&spec, &current, domain, &mut rng.derive(FIND_MAX + j as u64))?;
        out.points.push(next.location);
        out.tags.push(PointTag::Slot(j));
    }
    Ok(out)
}

/// One loop iteration (or the initial design at iteration 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub points: Vec<Vec<f64>>,
    /// `None` where the evaluation failed.
    pub outcomes: Vec<Option<f64>>,
    pub batch_size: usize,
    pub best_so_far: f64,
    pub cum_evaluations: usize,
    pub wall_ms: f64,
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<IterationRecord>,
}

impl RunHistory {
    pub fn initial(&self) -> &IterationRecord {
        &self.records[0]
    }

    pub fn iterations(&self) -> &[IterationRecord] {
        &self.records[1..]
    }

    pub fn final_best(&self) -> f64 {
        self.records.last().map_or(f64::NEG_INFINITY, |r| r.best_so_far)
    }

    pub fn total_evaluations(&self) -> usize {
        self.records.last().map_or(0, |r| r.cum_evaluations)
    }

    /// `n_t` for `t = 1..T`.
    pub fn batch_sizes(&self) -> Vec<usize> {
        self.iterations().iter().map(|r| r.batch_size).collect()
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Strategy {
        iteration: usize,
        #[source]
        source: StrategyError,
        history: Box<RunHistory>,
    },
    #[error("iteration {iteration}: every evaluation failed")]
    AllEvaluationsFailed {
        iteration: usize,
        history: Box<RunHistory>,
    },
}

impl RunError {
    /// History recorded before the failure.
    pub fn partial_history(&self) -> Option<&RunHistory> {
        match self {
            RunError::Config(_) => None,
            RunError::Strategy { history, .. } | RunError::AllEvaluationsFailed { history, .. } => {
                Some(history)
            }
        }
    }
}

/// Maps observations into the space the GP is fitted in and proposals back.
#[derive(Debug, Clone)]
pub struct ModelSpace {
    pub native: SearchDomain,
    normalize: bool,
    standardize: bool,
}

impl ModelSpace {
    pub fn new(native: SearchDomain, normalize: bool, standardize: bool) -> Self {
        Self {
            native,
            normalize,
            standardize,
        }
    }

    pub fn domain(&self) -> SearchDomain {
        if self.normalize {
            SearchDomain::unit(self.native.dim()).expect("dimension is positive")
        } else {
            self.native.clone()
        }
    }

    pub fn data(&self, data: &ObservationSet) -> ObservationSet {
        let mut out = if self.normalize {
            data.map_inputs(|x| self.native.to_unit(x))
        } else {
            data.clone()
        };
        if self.standardize && out.len() > 1 {
            let n = out.len() as f64;
            let mean = out.outcomes().iter().sum::<f64>() / n;
            let var = out.outcomes().iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            out = out.map_outcomes(|y| (y - mean) / sd);
        }
        out
    }

    pub fn to_native(&self, x: &[f64]) -> Vec<f64> {
        let x = if self.normalize {
            self.native.from_unit(x)
        } else {
            x.to_vec()
        };
        self.native.clip(&x)
    }
}

/// Proposal for `strategy` given observations already in model space.
pub fn propose(
    strategy: Strategy,
    data: &ObservationSet,
    domain: &SearchDomain,
    config: &RunConfig,
    rng: &RngStream,
) -> Result<BatchProposal, StrategyError> {
    let params = KernelParams::with_gamma(config.kernel_gamma)?;
    let (gp, _) = fit_with_retry(data, &params, FIT_RETRIES)?;
    let spec = AcquisitionSpec::for_data(strategy.acquisition(), data, config.beta_sqrt);
    let q = config.batch_size;
    match strategy {
        Strategy::B3o => propose_b3o(&gp, &spec, domain, &B3oSettings::from_config(config), rng),
        Strategy::Ei | Strategy::Ucb => propose_sequential(&gp, &spec, domain, rng),
        Strategy::RandEi | Strategy::RandUcb => propose_random_batch(&gp, &spec, domain, q, rng),
        Strategy::ClEi | Strategy::ClUcb => propose_constant_liar(data, &gp, &spec, domain, q, rng),
        Strategy::Bucb => propose_bucb(&gp, domain, q, config.beta_sqrt, rng),
    }
}

/// Evaluate `points` concurrently; failed or non-finite evaluations are `None`.
pub fn evaluate_batch<F, E>(objective: &F, points: &[Vec<f64>]) -> Vec<Option<f64>>
where
    F: Fn(&[f64]) -> Result<f64, E> + Sync,
{
    points
        .par_iter()
        .map(|x| objective(x).ok().filter(|v| v.is_finite()))
        .collect()
}

fn absorb(
    data: &mut ObservationSet,
    points: &[Vec<f64>],
    outcomes: &[Option<f64>],
) -> usize {
    let mut ok = 0;
    for (x, y) in points.iter().zip(outcomes) {
        if let Some(y) = y {
            if data.push(x.clone(), *y).is_ok() {
                ok += 1;
            }
        }
    }
    ok
}

/// Initial design: `n` uniform points.
pub fn initial_design<R: UnitSource + ?Sized>(
    domain: &SearchDomain,
    n: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..n).map(|_| domain.uniform_point(rng)).collect()
}

/// Maximize `objective` over `domain` with `config.strategy`.
///
/// Draws `config.initial_points` uniform points from `rng.derive(0)`, then
/// runs `config.iterations` iterations, iteration `t` proposing from
/// `rng.derive(t)`.
pub fn run_loop<F, E>(
    objective: &F,
    domain: &SearchDomain,
    config: &RunConfig,
    rng: &RngStream,
) -> Result<RunHistory, RunError>
where
    F: Fn(&[f64]) -> Result<f64, E> + Sync,
{
    config.validate().map_err(RunError::Config)?;
    if domain.dim() != config.dim {
        return Err(RunError::Config(format!(
            "domain has dimension {}, configuration {}",
            domain.dim(),
            config.dim
        )));
    }
    let space = ModelSpace::new(domain.clone(), config.normalize, config.standardize);
    let model_domain = space.domain();
    let mut data = ObservationSet::new(domain.dim());
    let mut history = RunHistory { records: Vec::new() };

    let started = Instant::now();
    let points = initial_design(domain, config.initial_points, &mut rng.derive(0));
    let outcomes = evaluate_batch(objective, &points);
    let ok = absorb(&mut data, &points, &outcomes);
    history.records.push(IterationRecord {
        iteration: 0,
        batch_size: points.len(),
        cum_evaluations: points.len(),
        best_so_far: data.best().unwrap_or(f64::NEG_INFINITY),
        points,
        outcomes,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        fallback: None,
    });
    if ok == 0 {
        return Err(RunError::AllEvaluationsFailed {
            iteration: 0,
            history: Box::new(history),
        });
    }

    for t in 1..=config.iterations {
        let started = Instant::now();
        let model_data = space.data(&data);
        let proposal = match propose(
            config.strategy,
            &model_data,
            &model_domain,
            config,
            &rng.derive(t as u64),
        ) {
            Ok(p) => p,
            Err(source) => {
                return Err(RunError::Strategy {
                    iteration: t,
                    source,
                    history: Box::new(history),
                })
            }
        };
        let points: Vec<Vec<f64>> = proposal.points.iter().map(|x| space.to_native(x)).collect();
        let outcomes = evaluate_batch(objective, &points);
        let ok = absorb(&mut data, &points, &outcomes);
        let prev = history.records.last().expect("initial record");
        let record = IterationRecord {
            iteration: t,
            batch_size: points.len(),
            cum_evaluations: prev.cum_evaluations + points.len(),
            best_so_far: data.best().unwrap_or(f64::NEG_INFINITY),
            points,
            outcomes,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            fallback: proposal.fallback,
        };
        history.records.push(record);
        if ok == 0 {
            return Err(RunError::AllEvaluationsFailed {
                iteration: t,
                history: Box::new(history),
            });
        }
    }
    Ok(history)
}
