//! Core value types: search boxes, observation sets, random streams and run
//! configuration.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::strategies::Strategy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("domain must have at least one dimension")]
    Empty,
    #[error("bounds have different lengths ({lower} vs {upper})")]
    LengthMismatch { lower: usize, upper: usize },
    #[error("axis {axis}: lower bound {lower} must be strictly below upper bound {upper}")]
    Degenerate { axis: usize, lower: f64, upper: f64 },
    #[error("point has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in observation")]
    NonFinite,
}

/// Axis-aligned box `[lower, upper]` in `R^D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SearchDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, DomainError> {
        if lower.len() != upper.len() {
            return Err(DomainError::LengthMismatch {
                lower: lower.len(),
                upper: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(DomainError::Empty);
        }
        for (axis, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            // NaN bounds fail this comparison too.
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(DomainError::Degenerate {
                    axis,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// The hypercube `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self, DomainError> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn unit(dim: usize) -> Result<Self, DomainError> {
        Self::cube(dim, 0.0, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    /// Euclidean length of the box diagonal.
    pub fn diagonal(&self) -> f64 {
        (0..self.dim())
            .map(|d| self.width(d).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<(), DomainError> {
        if x.len() == self.dim() {
            Ok(())
        } else {
            Err(DomainError::Dimension {
                expected: self.dim(),
                got: x.len(),
            })
        }
    }

    pub fn clip(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect()
    }

    pub fn uniform_point<S: UnitSource + ?Sized>(&self, rng: &mut S) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| {
                let v = lo + (hi - lo) * rng.unit();
                // lo + w * u can round up to hi + ulp for u just below 1.
                v.min(*hi)
            })
            .collect()
    }

    /// Map a point of this box onto the unit box.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(d, v)| (v - self.lower[d]) / self.width(d))
            .collect()
    }

    /// Inverse of [`SearchDomain::to_unit`].
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(d, v)| (self.lower[d] + v * self.width(d)).clamp(self.lower[d], self.upper[d]))
            .collect()
    }
}

/// Draw a point uniformly from `domain`.
pub fn uniform_point<S: UnitSource + ?Sized>(domain: &SearchDomain, rng: &mut S) -> Vec<f64> {
    domain.uniform_point(rng)
}

/// Clamp each coordinate of `point` into `domain`.
pub fn clip_to_domain(point: &[f64], domain: &SearchDomain) -> Vec<f64> {
    domain.clip(point)
}

/// Evaluated inputs and their (possibly noisy) outcomes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservationSet {
    dim: usize,
    inputs: Vec<Vec<f64>>,
    outcomes: Vec<f64>,
}

impl ObservationSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            inputs: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    pub fn from_parts(
        dim: usize,
        inputs: Vec<Vec<f64>>,
        outcomes: Vec<f64>,
    ) -> Result<Self, DomainError> {
        let mut set = Self::new(dim);
        if inputs.len() != outcomes.len() {
            return Err(DomainError::LengthMismatch {
                lower: inputs.len(),
                upper: outcomes.len(),
            });
        }
        for (x, y) in inputs.into_iter().zip(outcomes) {
            set.push(x, y)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<(), DomainError> {
        if x.len() != self.dim {
            return Err(DomainError::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(DomainError::NonFinite);
        }
        self.inputs.push(x);
        self.outcomes.push(y);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Largest observed outcome, if any.
    pub fn best(&self) -> Option<f64> {
        self.outcomes.iter().copied().reduce(f64::max)
    }

    /// Copy with outcomes replaced by `f(y)`.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dim: self.dim,
            inputs: self.inputs.clone(),
            outcomes: self.outcomes.iter().map(|y| f(*y)).collect(),
        }
    }

    /// Copy with inputs replaced by `f(x)`.
    pub fn map_inputs(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            dim: self.dim,
            inputs: self.inputs.iter().map(|x| f(x)).collect(),
            outcomes: self.outcomes.clone(),
        }
    }
}

/// Anything that yields uniform draws on `[0, 1)`.
///
/// The samplers only need this much randomness, which keeps them testable
/// against scripted sequences.
pub trait UnitSource {
    fn unit(&mut self) -> f64;

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}

/// A reproducible random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8 with the stream id mapped onto the cipher's stream
/// counter, so streams with distinct ids never overlap.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh stream whose id is a deterministic function of this stream's
    /// id and `tag`. Does not advance `self`.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream, tag))
    }

    /// Derive through a path of tags, e.g. `(replicate, iteration, chain)`.
    pub fn derive_path(&self, tags: &[u64]) -> RngStream {
        let stream = tags.iter().fold(self.stream, |s, t| mix(s, *t));
        RngStream::new(self.seed, stream)
    }
}

// splitmix64 finalizer over the pair.
fn mix(stream: u64, tag: u64) -> u64 {
    let mut z = stream
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl UnitSource for RngStream {
    fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Settings for one benchmark experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub function: String,
    pub dim: usize,
    pub strategy: Strategy,
    pub iterations: usize,
    pub initial_points: usize,
    pub batch_size: usize,
    pub beta_sqrt: f64,
    pub kernel_gamma: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Fit the GP on the unit box instead of the native domain.
    pub normalize: bool,
    /// Standardize outcomes to zero mean, unit variance before each GP fit.
    pub standardize: bool,
    /// Minimum mixture weight for a component to enter a batch.
    pub weight_threshold: f64,
    /// Peaks closer than this fraction of the domain diagonal are merged.
    pub merge_fraction: f64,
    /// Slice-sampling chains per batch.
    pub chains: usize,
    /// Slice iterations per chain.
    pub chain_length: usize,
}

impl RunConfig {
    /// Experimental defaults for a `dim`-dimensional problem.
    pub fn new(function: impl Into<String>, dim: usize, strategy: Strategy) -> Self {
        let d = dim.max(1);
        Self {
            function: function.into(),
            dim: d,
            strategy,
            iterations: 10 * d,
            initial_points: 3 * d,
            batch_size: if d < 5 { 3 } else { d },
            beta_sqrt: 2.0,
            kernel_gamma: 0.1 * d as f64,
            replicates: 20,
            seed: 0,
            normalize: false,
            standardize: false,
            weight_threshold: 0.15,
            merge_fraction: 0.01,
            chains: 200,
            chain_length: 50,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 {
            return Err("dim must be positive".into());
        }
        if self.initial_points == 0 {
            return Err("initial points must be positive".into());
        }
        if self.batch_size == 0 {
            return Err("batch size must be positive".into());
        }
        if self.replicates == 0 {
            return Err("replicates must be positive".into());
        }
        if !(self.beta_sqrt > 0.0) {
            return Err("beta-sqrt must be positive".into());
        }
        if !(self.kernel_gamma > 0.0) {
            return Err("gamma must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.weight_threshold) {
            return Err("weight threshold must lie in [0, 1]".into());
        }
        if !(self.merge_fraction >= 0.0) {
            return Err("merge fraction must be nonnegative".into());
        }
        if self.chains == 0 || self.chain_length == 0 {
            return Err("chains and chain length must be positive".into());
        }
        Ok(())
    }
}
