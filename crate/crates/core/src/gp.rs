//! Zero-mean Gaussian-process regression with a squared-exponential kernel.
//!
//! The posterior keeps the mean part (training inputs and weights) separate
//! from the variance part (inputs and Cholesky factor). Fitting fills both
//! from the same data; [`GpPosterior::hallucinate`] grows only the variance
//! part, since GP predictive variance does not depend on outcomes.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::domain::ObservationSet;
use crate::linalg::{Cholesky, NotPositiveDefinite};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("no training data")]
    Empty,
    #[error("kernel matrix factorization failed at pivot {pivot} (jitter {jitter:e})")]
    Factorization { pivot: usize, jitter: f64 },
    #[error("invalid kernel parameters: {0}")]
    Params(&'static str),
    #[error("non-finite prediction")]
    NonFinite,
}

/// `k(x, x') = σ_f² exp(-γ ‖x - x'‖²)` plus `jitter` on the training diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub gamma: f64,
    pub signal_variance: f64,
    pub jitter: f64,
}

impl KernelParams {
    pub fn new(gamma: f64, signal_variance: f64, jitter: f64) -> Result<Self, GpError> {
        if !(gamma > 0.0) {
            return Err(GpError::Params("gamma must be positive"));
        }
        if !(signal_variance > 0.0) {
            return Err(GpError::Params("signal variance must be positive"));
        }
        if !(jitter >= 0.0) {
            return Err(GpError::Params("jitter must be non-negative"));
        }
        Ok(Self {
            gamma,
            signal_variance,
            jitter,
        })
    }

    /// Unit signal variance and the default jitter of `1e-6`.
    pub fn with_gamma(gamma: f64) -> Result<Self, GpError> {
        Self::new(gamma, 1.0, 1e-6)
    }

    #[inline]
    fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.signal_variance * (-self.gamma * d2).exp()
    }
}

pub fn kernel_eval(x: &[f64], y: &[f64], params: &KernelParams) -> Result<f64, GpError> {
    if x.len() != y.len() {
        return Err(GpError::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(params.eval_unchecked(x, y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

/// Anything that predicts a Gaussian marginal at a point.
pub trait Surrogate: Sync {
    fn dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<Prediction, GpError>;
}

/// The zero-mean prior, used before any data exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorGp {
    pub params: KernelParams,
    pub dim: usize,
}

pub fn predict_prior(params: &KernelParams, _x: &[f64]) -> Prediction {
    Prediction {
        mean: 0.0,
        variance: params.signal_variance,
    }
}

impl Surrogate for PriorGp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64]) -> Result<Prediction, GpError> {
        if x.len() != self.dim {
            return Err(GpError::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(predict_prior(&self.params, x))
    }
}

#[derive(Debug)]
pub struct GpPosterior {
    params: KernelParams,
    dim: usize,
    // Mean part: flattened N×D inputs and weights (K + σ_n² I)⁻¹ y.
    mean_inputs: Vec<f64>,
    weights: Vec<f64>,
    // Variance part: flattened M×D inputs (M ≥ N) and the factor of their
    // jittered kernel matrix.
    var_inputs: Vec<f64>,
    factor: Cholesky,
    clamped: AtomicU64,
}

impl Clone for GpPosterior {
    fn clone(&self) -> Self {
        Self {
            params: self.params,
            dim: self.dim,
            mean_inputs: self.mean_inputs.clone(),
            weights: self.weights.clone(),
            var_inputs: self.var_inputs.clone(),
            factor: self.factor.clone(),
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

fn kernel_matrix(inputs: &[f64], dim: usize, params: &KernelParams) -> Vec<f64> {
    let n = inputs.len() / dim;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        let xi = &inputs[i * dim..(i + 1) * dim];
        for j in 0..i {
            let v = params.eval_unchecked(xi, &inputs[j * dim..(j + 1) * dim]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] = params.signal_variance + params.jitter;
    }
    k
}

/// Condition the prior on `data`.
pub fn fit(data: &ObservationSet, params: &KernelParams) -> Result<GpPosterior, GpError> {
    if data.is_empty() {
        return Err(GpError::Empty);
    }
    let dim = data.dim();
    let inputs: Vec<f64> = data.inputs().iter().flatten().copied().collect();
    let k = kernel_matrix(&inputs, dim, params);
    let factor = Cholesky::new(&k, data.len()).map_err(|e: NotPositiveDefinite| {
        GpError::Factorization {
            pivot: e.pivot,
            jitter: params.jitter,
        }
    })?;
    let weights = factor.solve(data.outcomes());
    Ok(GpPosterior {
        params: *params,
        dim,
        mean_inputs: inputs.clone(),
        weights,
        var_inputs: inputs,
        factor,
        clamped: AtomicU64::new(0),
    })
}

/// [`fit`] with the jitter doubled up to `retries` times on factorization
/// failure. Returns the posterior and the jitter that succeeded.
pub fn fit_with_retry(
    data: &ObservationSet,
    params: &KernelParams,
    retries: usize,
) -> Result<(GpPosterior, f64), GpError> {
    let mut trial = *params;
    let mut last = None;
    for _ in 0..=retries {
        match fit(data, &trial) {
            Ok(gp) => return Ok((gp, trial.jitter)),
            Err(e @ GpError::Factorization { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
        trial.jitter = if trial.jitter == 0.0 {
            1e-6 * trial.signal_variance
        } else {
            trial.jitter * 2.0
        };
    }
    Err(last.unwrap_or(GpError::Empty))
}

impl GpPosterior {
    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Number of points in the mean part (real observations).
    pub fn n_train(&self) -> usize {
        self.weights.len()
    }

    /// Number of points conditioning the variance (observations plus
    /// hallucinated inputs).
    pub fn n_conditioning(&self) -> usize {
        self.factor.dim()
    }

    /// How many predictions had their variance clamped at zero.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    fn check(&self, x: &[f64]) -> Result<(), GpError> {
        if x.len() != self.dim {
            Err(GpError::Dimension {
                expected: self.dim,
                got: x.len(),
            })
        } else {
            Ok(())
        }
    }

    pub fn mean(&self, x: &[f64]) -> Result<f64, GpError> {
        self.check(x)?;
        Ok(self.mean_unchecked(x))
    }

    fn mean_unchecked(&self, x: &[f64]) -> f64 {
        self.mean_inputs
            .chunks_exact(self.dim)
            .zip(&self.weights)
            .map(|(xi, w)| self.params.eval_unchecked(x, xi) * w)
            .sum()
    }

    fn variance_unclamped(&self, x: &[f64]) -> f64 {
        let mut v: Vec<f64> = self
            .var_inputs
            .chunks_exact(self.dim)
            .map(|xi| self.params.eval_unchecked(x, xi))
            .collect();
        self.factor.solve_lower_in_place(&mut v);
        self.params.signal_variance - v.iter().map(|a| a * a).sum::<f64>()
    }

    /// Mean and variance before clamping the variance.
    pub fn predict_raw(&self, x: &[f64]) -> Result<Prediction, GpError> {
        self.check(x)?;
        Ok(Prediction {
            mean: self.mean_unchecked(x),
            variance: self.variance_unclamped(x),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, GpError> {
        let raw = self.predict_raw(x)?;
        if !raw.mean.is_finite() || !raw.variance.is_finite() {
            return Err(GpError::NonFinite);
        }
        let variance = if raw.variance < 0.0 {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            0.0
        } else {
            raw.variance.min(self.params.signal_variance)
        };
        Ok(Prediction {
            mean: raw.mean,
            variance,
        })
    }

    /// Posterior whose variance is conditioned on `x_new` as well, with the
    /// predictive mean left untouched.
    pub fn hallucinate(&self, x_new: &[f64]) -> Result<GpPosterior, GpError> {
        self.check(x_new)?;
        let border: Vec<f64> = self
            .var_inputs
            .chunks_exact(self.dim)
            .map(|xi| self.params.eval_unchecked(x_new, xi))
            .collect();
        let factor = self
            .factor
            .extend(&border, self.params.signal_variance + self.params.jitter)
            .map_err(|e| GpError::Factorization {
                pivot: e.pivot,
                jitter: self.params.jitter,
            })?;
        let mut var_inputs = self.var_inputs.clone();
        var_inputs.extend_from_slice(x_new);
        Ok(GpPosterior {
            params: self.params,
            dim: self.dim,
            mean_inputs: self.mean_inputs.clone(),
            weights: self.weights.clone(),
            var_inputs,
            factor,
            clamped: AtomicU64::new(0),
        })
    }

    /// `L Lᵀ` for the variance part, row-major. Diagnostics only.
    pub fn reconstruct_gram(&self) -> Vec<f64> {
        let n = self.factor.dim();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..=i.min(j))
                    .map(|k| self.factor.get(i, k) * self.factor.get(j, k))
                    .sum();
            }
        }
        out
    }

    /// The jittered kernel matrix of the variance inputs, row-major.
    pub fn gram(&self) -> Vec<f64> {
        kernel_matrix(&self.var_inputs, self.dim, &self.params)
    }
}

impl Surrogate for GpPosterior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64]) -> Result<Prediction, GpError> {
        GpPosterior::predict(self, x)
    }
}
