//! Truncated mean-field variational inference for the Dirichlet-process
//! (infinite) Gaussian mixture, and extraction of its component means as
//! batch candidates.
//!
//! Generative model, truncated at `K` components:
//!
//! ```text
//! v_k ~ Beta(1, γ)                 k < K,  v_K = 1
//! π_k = v_k ∏_{l<k} (1 - v_l)
//! μ_k ~ N(μ₀, I)
//! Λ_k ~ Wishart(ν₀, W₀)            (component precision)
//! z_i ~ Categorical(π),  s_i ~ N(μ_{z_i}, Λ_{z_i}⁻¹)
//! ```
//!
//! The variational family is `q(v_k) = Beta(η_k1, η_k2)`,
//! `q(μ_k) = N(λ_k, C_k)`, `q(Λ_k) = Wishart(a_k, B_k)` and
//! `q(z_i) = Categorical(φ_i)`. Each block update is the exact coordinate
//! maximizer of the bound, so the bound never decreases across sweeps.

use std::f64::consts::PI;

use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::bgss::SampleSet;
use crate::domain::{SearchDomain, UnitSource};
use crate::linalg::Cholesky;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IgmmError {
    #[error("{got} samples, at least {needed} required")]
    TooFewSamples { got: usize, needed: usize },
    #[error("non-finite evidence bound at sweep {sweep}")]
    NonFinite { sweep: usize },
    #[error("invalid prior: {0}")]
    Prior(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgmmPrior {
    /// DP concentration γ.
    pub concentration: f64,
    /// Truncation level K.
    pub truncation: usize,
    /// Center of the mean prior; `None` uses the sample mean.
    pub mean_center: Option<Vec<f64>>,
    /// Wishart degrees of freedom; `None` uses `D + 2`.
    pub wishart_dof: Option<f64>,
    /// Row-major Wishart scale matrix; `None` uses the identity.
    pub wishart_scale: Option<Vec<f64>>,
}

impl Default for IgmmPrior {
    fn default() -> Self {
        Self {
            concentration: 1.0,
            truncation: 10,
            mean_center: None,
            wishart_dof: None,
            wishart_scale: None,
        }
    }
}

/// Prior with every default filled in for a particular sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPrior {
    pub concentration: f64,
    pub truncation: usize,
    pub mean_center: Vec<f64>,
    pub dof: f64,
    pub scale: Vec<f64>,
    scale_inv: Vec<f64>,
    scale_log_det: f64,
}

impl IgmmPrior {
    pub fn resolve(&self, samples: &SampleSet) -> Result<ResolvedPrior, IgmmError> {
        let d = samples.dim();
        if self.truncation == 0 {
            return Err(IgmmError::Prior("truncation must be at least 1"));
        }
        if !(self.concentration > 0.0) {
            return Err(IgmmError::Prior("concentration must be positive"));
        }
        let dof = self.wishart_dof.unwrap_or(d as f64 + 2.0);
        if !(dof > d as f64 - 1.0) {
            return Err(IgmmError::Prior("Wishart dof must exceed D - 1"));
        }
        let mean_center = match &self.mean_center {
            Some(m) if m.len() != d => return Err(IgmmError::Prior("mean center dimension")),
            Some(m) => m.clone(),
            None => sample_mean(samples),
        };
        let scale = match &self.wishart_scale {
            Some(s) if s.len() != d * d => return Err(IgmmError::Prior("scale matrix shape")),
            Some(s) => s.clone(),
            None => identity(d),
        };
        let ch = Cholesky::new(&scale, d)
            .map_err(|_| IgmmError::Prior("scale matrix must be positive definite"))?;
        Ok(ResolvedPrior {
            concentration: self.concentration,
            truncation: self.truncation,
            mean_center,
            dof,
            scale_inv: ch.inverse(),
            scale_log_det: ch.log_det(),
            scale,
        })
    }
}

/// Variational factors of one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Mean of `q(μ_k)`.
    pub mean: Vec<f64>,
    /// Covariance of `q(μ_k)`, row-major.
    pub mean_cov: Vec<f64>,
    /// Wishart degrees of freedom `a_k`.
    pub dof: f64,
    /// Wishart scale `B_k`, row-major.
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgmmPosterior {
    dim: usize,
    /// `(η_k1, η_k2)` for the `K - 1` free sticks; the last stick is fixed
    /// at one.
    pub sticks: Vec<(f64, f64)>,
    pub components: Vec<Component>,
    /// Component-major `K × N`: block `k` holds `φ_ik` for every sample.
    pub responsibilities: Vec<f64>,
    /// Bound after each sweep.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub prior: ResolvedPrior,
}

impl IgmmPosterior {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn truncation(&self) -> usize {
        self.components.len()
    }

    pub fn n_samples(&self) -> usize {
        self.responsibilities.len() / self.truncation()
    }

    /// `φ_ik` for every component of sample `i`.
    pub fn responsibility_row(&self, i: usize) -> Vec<f64> {
        let n = self.n_samples();
        (0..self.truncation()).map(|c| self.responsibilities[c * n + i]).collect()
    }

    /// `ŵ_k = Σ_i φ_ik / N`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.n_samples();
        self.responsibilities
            .chunks_exact(n)
            .map(|col| col.iter().sum::<f64>() / n as f64)
            .collect()
    }

    pub fn sweeps(&self) -> usize {
        self.elbo_trace.len()
    }
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// Samples as a column-major `D × N` array.
fn columns(samples: &SampleSet) -> Vec<f64> {
    let d = samples.dim();
    (0..d)
        .flat_map(|j| samples.points().iter().map(move |p| p[j]))
        .collect()
}

fn sample_mean(samples: &SampleSet) -> Vec<f64> {
    let d = samples.dim();
    let mut m = vec![0.0; d];
    for p in samples.points() {
        for (a, b) in m.iter_mut().zip(p) {
            *a += b;
        }
    }
    let n = samples.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn trace(a: &[f64], d: usize) -> f64 {
    (0..d).map(|i| a[i * d + i]).sum()
}

fn trace_of_product(a: &[f64], b: &[f64], d: usize) -> f64 {
    // tr(A B) = Σ_ij A_ij B_ji
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += a[i * d + j] * b[j * d + i];
        }
    }
    s
}

fn ln_multigamma(a: f64, d: usize) -> f64 {
    d as f64 * (d as f64 - 1.0) / 4.0 * PI.ln()
        + (1..=d).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// `ln B(W, ν)`: log normalizer of a Wishart density, given `ln|W|`.
fn wishart_ln_norm(log_det_scale: f64, dof: f64, d: usize) -> f64 {
    -0.5 * dof * log_det_scale - 0.5 * dof * d as f64 * 2f64.ln() - ln_multigamma(0.5 * dof, d)
}

/// `E[ln |Λ|]` under `Wishart(dof, scale)`.
fn wishart_expected_log_det(log_det_scale: f64, dof: f64, d: usize) -> f64 {
    (1..=d)
        .map(|j| digamma(0.5 * (dof + 1.0 - j as f64)))
        .sum::<f64>()
        + d as f64 * 2f64.ln()
        + log_det_scale
}

/// Expectations of one component that the responsibility update and the
/// bound need.
struct ComponentMoments {
    precision: Vec<f64>,
    expected_log_det: f64,
    trace_precision_cov: f64,
    scale_log_det: f64,
    mean_cov_log_det: f64,
}

fn moments(c: &Component, d: usize) -> ComponentMoments {
    let scale_log_det = Cholesky::new(&c.scale, d)
        .map(|ch| ch.log_det())
        .unwrap_or(f64::NAN);
    let mean_cov_log_det = Cholesky::new(&c.mean_cov, d)
        .map(|ch| ch.log_det())
        .unwrap_or(f64::NAN);
    let precision: Vec<f64> = c.scale.iter().map(|v| v * c.dof).collect();
    ComponentMoments {
        expected_log_det: wishart_expected_log_det(scale_log_det, c.dof, d),
        trace_precision_cov: trace_of_product(&precision, &c.mean_cov, d),
        precision,
        scale_log_det,
        mean_cov_log_det,
    }
}

/// `(E[ln v_k], E[ln(1 - v_k)])`; the last stick has `v_K = 1`.
fn stick_expectations(sticks: &[(f64, f64)], k: usize) -> Vec<(f64, f64)> {
    (0..k)
        .map(|j| match sticks.get(j) {
            Some(&(a, b)) => {
                let s = digamma(a + b);
                (digamma(a) - s, digamma(b) - s)
            }
            None => (0.0, f64::NEG_INFINITY),
        })
        .collect()
}

/// `E[ln π_k]` under the stick-breaking construction.
fn expected_log_weights(sticks: &[(f64, f64)], k: usize) -> Vec<f64> {
    let e = stick_expectations(sticks, k);
    let mut acc = 0.0;
    e.iter()
        .map(|(ln_v, ln_1mv)| {
            let out = ln_v + acc;
            acc += ln_1mv;
            out
        })
        .collect()
}

/// Sufficient statistics of the soft assignment.
struct Stats {
    counts: Vec<f64>,
    means: Vec<Vec<f64>>,
    scatters: Vec<Vec<f64>>,
}

/// `phi` is component-major `K × N`, `cols` column-major `D × N`.
fn statistics(cols: &[f64], phi: &[f64], k: usize, d: usize) -> Stats {
    let n = cols.len() / d;
    let mut counts = vec![0.0; k];
    let mut means = vec![vec![0.0; d]; k];
    let mut scatters = vec![vec![0.0; d * d]; k];
    let mut centered = vec![0.0; d * n];
    let mut weighted = vec![0.0; n];
    for c in 0..k {
        let r = &phi[c * n..(c + 1) * n];
        let count: f64 = r.iter().sum();
        counts[c] = count;
        if !(count > 0.0) {
            continue;
        }
        for j in 0..d {
            let col = &cols[j * n..(j + 1) * n];
            means[c][j] = r.iter().zip(col).map(|(a, b)| a * b).sum::<f64>() / count;
        }
        for j in 0..d {
            let m = means[c][j];
            let src = &cols[j * n..(j + 1) * n];
            for (t, v) in centered[j * n..(j + 1) * n].iter_mut().zip(src) {
                *t = v - m;
            }
        }
        let sc = &mut scatters[c];
        for j in 0..d {
            let cj = &centered[j * n..(j + 1) * n];
            for ((w, a), b) in weighted.iter_mut().zip(r).zip(cj) {
                *w = a * b;
            }
            for l in 0..=j {
                let cl = &centered[l * n..(l + 1) * n];
                let v: f64 = weighted.iter().zip(cl).map(|(a, b)| a * b).sum();
                sc[j * d + l] = v;
                sc[l * d + j] = v;
            }
        }
    }
    Stats {
        counts,
        means,
        scatters,
    }
}

fn update_sticks(counts: &[f64], concentration: f64) -> Vec<(f64, f64)> {
    let k = counts.len();
    (0..k.saturating_sub(1))
        .map(|j| {
            let tail: f64 = counts[j + 1..].iter().sum();
            (1.0 + counts[j], concentration + tail)
        })
        .collect()
}

/// Optimal `q(μ_k)` given `q(Λ_k)` and the statistics.
fn update_mean(prior: &ResolvedPrior, count: f64, xbar: &[f64], comp: &mut Component, d: usize) {
    let precision: Vec<f64> = comp.scale.iter().map(|v| v * comp.dof).collect();
    let mut post_prec = identity(d);
    for (p, l) in post_prec.iter_mut().zip(&precision) {
        *p += count * l;
    }
    let ch = Cholesky::new(&post_prec, d).expect("I + N E[Λ] is positive definite");
    let mut rhs = prior.mean_center.clone();
    for i in 0..d {
        let r: f64 = (0..d).map(|j| precision[i * d + j] * xbar[j]).sum();
        rhs[i] += count * r;
    }
    comp.mean = ch.solve(&rhs);
    comp.mean_cov = ch.inverse();
}

/// Optimal `q(Λ_k)` given `q(μ_k)` and the statistics.
fn update_precision(
    prior: &ResolvedPrior,
    count: f64,
    xbar: &[f64],
    scatter: &[f64],
    comp: &mut Component,
    d: usize,
) {
    let mut inv = prior.scale_inv.clone();
    for i in 0..d {
        for j in 0..d {
            let di = xbar[i] - comp.mean[i];
            let dj = xbar[j] - comp.mean[j];
            inv[i * d + j] += scatter[i * d + j] + count * (di * dj + comp.mean_cov[i * d + j]);
        }
    }
    let ch = Cholesky::new(&inv, d).expect("Wishart scale update is positive definite");
    comp.scale = ch.inverse();
    comp.dof = prior.dof + count;
}

/// Unnormalized log responsibilities `ln ρ_ik`, component-major `K × N`.
fn log_rho(cols: &[f64], post: &IgmmPosterior, mom: &[ComponentMoments]) -> Vec<f64> {
    let d = post.dim;
    let k = post.truncation();
    let n = cols.len() / d;
    let elw = expected_log_weights(&post.sticks, k);
    let mut out = vec![0.0; k * n];
    let mut centered = vec![0.0; d * n];
    for (c, block) in out.chunks_exact_mut(n).enumerate() {
        let constant = elw[c] + 0.5 * mom[c].expected_log_det
            - 0.5 * d as f64 * (2.0 * PI).ln()
            - 0.5 * mom[c].trace_precision_cov;
        let mean = &post.components[c].mean;
        let prec = &mom[c].precision;
        for j in 0..d {
            let src = &cols[j * n..(j + 1) * n];
            for (t, v) in centered[j * n..(j + 1) * n].iter_mut().zip(src) {
                *t = v - mean[j];
            }
        }
        block.fill(constant);
        for j in 0..d {
            let cj = &centered[j * n..(j + 1) * n];
            let diag = -0.5 * prec[j * d + j];
            for (o, a) in block.iter_mut().zip(cj) {
                *o += diag * a * a;
            }
            for l in 0..j {
                let cl = &centered[l * n..(l + 1) * n];
                let off = -prec[j * d + l];
                for ((o, a), b) in block.iter_mut().zip(cj).zip(cl) {
                    *o += off * a * b;
                }
            }
        }
    }
    out
}

/// Softmax over components for each sample of a `K × N` block, in place;
/// returns `Σ_i logsumexp_k ln ρ_ik`.
fn normalize_rows(rho: &mut [f64], k: usize) -> f64 {
    let n = rho.len() / k;
    let mut max = vec![f64::NEG_INFINITY; n];
    for block in rho.chunks_exact(n) {
        for (m, v) in max.iter_mut().zip(block) {
            *m = m.max(*v);
        }
    }
    let mut sum = vec![0.0; n];
    for block in rho.chunks_exact_mut(n) {
        for ((v, m), s) in block.iter_mut().zip(&max).zip(sum.iter_mut()) {
            let z = *v - m;
            *v = if z < -745.0 { 0.0 } else { z.exp() };
            *s += *v;
        }
    }
    let inv: Vec<f64> = sum.iter().map(|s| 1.0 / s).collect();
    for block in rho.chunks_exact_mut(n) {
        for (v, i) in block.iter_mut().zip(&inv) {
            *v *= i;
        }
    }
    max.iter().zip(&sum).map(|(m, s)| m + s.ln()).sum()
}

/// The evidence lower bound, split by term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    pub log_p_sticks: f64,
    pub log_p_means: f64,
    pub log_p_precisions: f64,
    pub log_p_assignments: f64,
    pub log_p_data: f64,
    pub entropy_sticks: f64,
    pub entropy_means: f64,
    pub entropy_precisions: f64,
    pub entropy_assignments: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.log_p_sticks
            + self.log_p_means
            + self.log_p_precisions
            + self.log_p_assignments
            + self.log_p_data
            + self.entropy_sticks
            + self.entropy_means
            + self.entropy_precisions
            + self.entropy_assignments
    }
}

/// Terms that do not involve the data or the responsibilities.
fn global_terms(post: &IgmmPosterior, mom: &[ComponentMoments]) -> ElboTerms {
    let d = post.dim;
    let df = d as f64;
    let prior = &post.prior;
    let gamma = prior.concentration;
    let mut t = ElboTerms::default();

    for &(a, b) in &post.sticks {
        let s = digamma(a + b);
        let (ln_v, ln_1mv) = (digamma(a) - s, digamma(b) - s);
        t.log_p_sticks += gamma.ln() + (gamma - 1.0) * ln_1mv;
        let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        t.entropy_sticks += ln_beta - (a - 1.0) * ln_v - (b - 1.0) * ln_1mv;
    }

    let prior_norm = wishart_ln_norm(prior.scale_log_det, prior.dof, d);
    for (c, m) in post.components.iter().zip(mom) {
        let dist2: f64 = c
            .mean
            .iter()
            .zip(&prior.mean_center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        t.log_p_means += -0.5 * df * (2.0 * PI).ln() - 0.5 * (dist2 + trace(&c.mean_cov, d));
        t.entropy_means += 0.5 * df * (1.0 + (2.0 * PI).ln()) + 0.5 * m.mean_cov_log_det;

        t.log_p_precisions += prior_norm + 0.5 * (prior.dof - df - 1.0) * m.expected_log_det
            - 0.5 * trace_of_product(&prior.scale_inv, &m.precision, d);
        t.entropy_precisions += -wishart_ln_norm(m.scale_log_det, c.dof, d)
            - 0.5 * (c.dof - df - 1.0) * m.expected_log_det
            + 0.5 * c.dof * df;
    }
    t
}

/// Evaluate the bound for an arbitrary posterior state.
pub fn elbo(post: &IgmmPosterior, samples: &SampleSet) -> Result<f64, IgmmError> {
    Ok(elbo_terms(post, samples)?.total())
}

pub fn elbo_terms(post: &IgmmPosterior, samples: &SampleSet) -> Result<ElboTerms, IgmmError> {
    let d = post.dim;
    let k = post.truncation();
    if samples.dim() != d {
        return Err(IgmmError::Shape("sample dimension"));
    }
    if samples.len() * k != post.responsibilities.len() {
        return Err(IgmmError::Shape("responsibility rows"));
    }
    if post.sticks.len() + 1 != k {
        return Err(IgmmError::Shape("stick count"));
    }
    let mom: Vec<ComponentMoments> = post.components.iter().map(|c| moments(c, d)).collect();
    let mut t = global_terms(post, &mom);
    let elw = expected_log_weights(&post.sticks, k);
    let n = samples.len();
    let rho = log_rho(&columns(samples), post, &mom);
    for (c, (phi, lr)) in post
        .responsibilities
        .chunks_exact(n)
        .zip(rho.chunks_exact(n))
        .enumerate()
    {
        for (&p, &l) in phi.iter().zip(lr) {
            if p > 0.0 {
                t.log_p_assignments += p * elw[c];
                t.log_p_data += p * (l - elw[c]);
                t.entropy_assignments -= p * p.ln();
            }
        }
    }
    Ok(t)
}

/// k-means++ seeding followed by nearest-seed hard assignment.
fn seed_responsibilities<R: UnitSource + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Vec<f64> {
    let n = points.len();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let mut centers: Vec<&[f64]> = Vec::with_capacity(k);
    let first = ((rng.unit() * n as f64) as usize).min(n - 1);
    centers.push(&points[first]);
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, centers[0])).collect();
    while centers.len() < k.min(n) {
        let total: f64 = nearest.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let target = rng.unit() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, w) in nearest.iter().enumerate() {
            acc += w;
            if acc > target {
                pick = i;
                break;
            }
        }
        centers.push(&points[pick]);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(p, &points[pick]));
        }
    }
    // Soft assignment to the seeds with a bandwidth equal to the overall
    // per-axis spread of the samples.
    let d = points[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let spread = points.iter().map(|p| dist2(p, &mean)).sum::<f64>() / (n * d) as f64;
    let bandwidth = if spread > 0.0 { spread } else { 1.0 };
    let mut phi = vec![f64::NEG_INFINITY; k * n];
    for (c, ctr) in centers.iter().enumerate() {
        for (v, p) in phi[c * n..(c + 1) * n].iter_mut().zip(points) {
            *v = -0.5 * dist2(p, ctr) / bandwidth;
        }
    }
    normalize_rows(&mut phi, k);
    phi
}

/// Stick terms of the bound plus `Σ_k N_k E[ln π_k]`, with the sticks at
/// their optimum for `counts`. The only part of the bound that depends on
/// the order of the components.
fn order_dependent_bound(counts: &[f64], concentration: f64) -> f64 {
    let sticks = update_sticks(counts, concentration);
    let elw = expected_log_weights(&sticks, counts.len());
    let mut total: f64 = counts.iter().zip(&elw).map(|(n, e)| n * e).sum();
    for &(a, b) in &sticks {
        let s = digamma(a + b);
        let (ln_v, ln_1mv) = (digamma(a) - s, digamma(b) - s);
        total += concentration.ln() + (concentration - 1.0) * ln_1mv;
        total += ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b) - (a - 1.0) * ln_v - (b - 1.0) * ln_1mv;
    }
    total
}

/// Ordering by decreasing size, if it raises the bound. The stick-breaking
/// prior favours large components first, and relabelling lets emptied
/// components drain to the tail instead of lingering.
fn better_order(counts: &[f64], concentration: f64) -> Option<Vec<usize>> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].total_cmp(&counts[a]).then(a.cmp(&b)));
    if order.iter().enumerate().all(|(i, &c)| i == c) {
        return None;
    }
    let sorted: Vec<f64> = order.iter().map(|&c| counts[c]).collect();
    (order_dependent_bound(&sorted, concentration) > order_dependent_bound(counts, concentration))
        .then_some(order)
}

fn permute_components(post: &mut IgmmPosterior, stats: &mut Stats, order: &[usize]) {
    let k = order.len();
    let n = post.responsibilities.len() / k;
    post.responsibilities = order
        .iter()
        .flat_map(|&c| post.responsibilities[c * n..(c + 1) * n].iter().copied())
        .collect();
    post.components = order.iter().map(|&c| post.components[c].clone()).collect();
    stats.counts = order.iter().map(|&c| stats.counts[c]).collect();
    stats.means = order.iter().map(|&c| stats.means[c].clone()).collect();
    stats.scatters = order.iter().map(|&c| stats.scatters[c].clone()).collect();
}

/// Coordinate-ascent fit of the truncated DP mixture to `samples`.
///
/// Each sweep updates the sticks, the component means, the component
/// precisions and then the responsibilities. Stops when the relative change
/// of the bound falls below `tol` or after `max_sweeps` sweeps.
pub fn fit_igmm<R: UnitSource + ?Sized>(
    samples: &SampleSet,
    prior: &IgmmPrior,
    tol: f64,
    max_sweeps: usize,
    rng: &mut R,
) -> Result<IgmmPosterior, IgmmError> {
    let d = samples.dim();
    let n = samples.len();
    let needed = d + 2;
    if n < needed {
        return Err(IgmmError::TooFewSamples { got: n, needed });
    }
    let prior = prior.resolve(samples)?;
    let k = prior.truncation;
    let cols = columns(samples);
    let points = &cols[..];

    let phi = seed_responsibilities(samples.points(), k, rng);
    let stats = statistics(points, &phi, k, d);
    let components = (0..k)
        .map(|c| {
            let mut comp = Component {
                mean: stats.means[c].clone(),
                mean_cov: vec![0.0; d * d],
                dof: prior.dof,
                scale: prior.scale.clone(),
            };
            if stats.counts[c] == 0.0 {
                comp.mean = prior.mean_center.clone();
                comp.mean_cov = identity(d);
            }
            update_precision(
                &prior,
                stats.counts[c],
                &stats.means[c],
                &stats.scatters[c],
                &mut comp,
                d,
            );
            comp
        })
        .collect();
    let mut post = IgmmPosterior {
        dim: d,
        sticks: update_sticks(&stats.counts, prior.concentration),
        components,
        responsibilities: phi,
        elbo_trace: Vec::new(),
        converged: false,
        prior,
    };

    let mut sweeps = 0;
    let mut bound = f64::NEG_INFINITY;
    while sweeps < max_sweeps.max(1) {
        let next = sweep(&mut post, points);
        sweeps += 1;
        if !next.is_finite() {
            return Err(IgmmError::NonFinite { sweep: sweeps - 1 });
        }
        let prev = bound;
        bound = next;
        post.elbo_trace.push(bound);
        if !prev.is_finite() || (bound - prev).abs() > STALL * tol * prev.abs() {
            continue;
        }
        // Coordinate ascent is stalling: try removing components, keeping
        // any removal that raises the bound.
        let mut accepted = false;
        for victim in deletion_candidates(&post) {
            if sweeps >= max_sweeps {
                break;
            }
            let mut cand = without_component(&post, points, victim);
            let b = sweep(&mut cand, points);
            sweeps += 1;
            if b.is_finite() && b > bound {
                cand.elbo_trace.push(b);
                post = cand;
                bound = b;
                accepted = true;
                break;
            }
        }
        if !accepted && (bound - prev).abs() <= tol * prev.abs() {
            post.converged = true;
            break;
        }
    }
    Ok(post)
}

/// Relative change, as a multiple of the tolerance, below which removal
/// moves are tried.
const STALL: f64 = 10.0;

/// One round of updates: component order, sticks, component means and
/// precisions, then responsibilities. Returns the bound.
fn sweep(post: &mut IgmmPosterior, points: &[f64]) -> f64 {
    let d = post.dim;
    let k = post.truncation();
    let mut stats = statistics(points, &post.responsibilities, k, d);
    if let Some(order) = better_order(&stats.counts, post.prior.concentration) {
        permute_components(post, &mut stats, &order);
    }
    post.sticks = update_sticks(&stats.counts, post.prior.concentration);
    for c in 0..k {
        let comp = &mut post.components[c];
        update_mean(&post.prior, stats.counts[c], &stats.means[c], comp, d);
        update_precision(
            &post.prior,
            stats.counts[c],
            &stats.means[c],
            &stats.scatters[c],
            comp,
            d,
        );
    }
    let mom: Vec<ComponentMoments> = post.components.iter().map(|c| moments(c, d)).collect();
    let mut rho = log_rho(points, post, &mom);
    // With fresh responsibilities the data, assignment and assignment
    // entropy terms collapse to Σ_i logsumexp_k ln ρ_ik.
    let data_part = normalize_rows(&mut rho, k);
    post.responsibilities = rho;
    global_terms(post, &mom).total() + data_part
}

/// Occupied components, smallest first.
fn deletion_candidates(post: &IgmmPosterior) -> Vec<usize> {
    let w = post.weights();
    let mut c: Vec<usize> = (0..w.len()).filter(|&j| w[j] >= 1e-3).collect();
    if c.len() < 2 {
        return Vec::new();
    }
    c.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b)));
    c
}

/// `post` with the responsibilities of `victim` handed to the other
/// components in proportion to their current fit.
fn without_component(post: &IgmmPosterior, points: &[f64], victim: usize) -> IgmmPosterior {
    let d = post.dim;
    let k = post.truncation();
    let mom: Vec<ComponentMoments> = post.components.iter().map(|c| moments(c, d)).collect();
    let mut rho = log_rho(points, post, &mom);
    let n = rho.len() / k;
    rho[victim * n..(victim + 1) * n].fill(f64::NEG_INFINITY);
    normalize_rows(&mut rho, k);
    let mut out = post.clone();
    out.responsibilities = rho;
    out
}

/// Candidate batch points: the means of the well-supported components.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakSet {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl PeakSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Keep components with weight at least `weight_threshold`, drop any mean
/// closer than `merge_tol` to a heavier kept mean, and clip to `domain`.
/// Never returns an empty set.
pub fn extract_peaks(
    post: &IgmmPosterior,
    domain: &SearchDomain,
    weight_threshold: f64,
    merge_tol: f64,
) -> PeakSet {
    let weights = post.weights();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));

    let mut out = PeakSet {
        means: Vec::new(),
        weights: Vec::new(),
    };
    for &c in &order {
        if weights[c] < weight_threshold {
            break;
        }
        let m = domain.clip(&post.components[c].mean);
        let close = out.means.iter().any(|kept| {
            kept.iter()
                .zip(&m)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                < merge_tol
        });
        if !close {
            out.means.push(m);
            out.weights.push(weights[c]);
        }
    }
    if out.means.is_empty() {
        let c = order[0];
        out.means.push(domain.clip(&post.components[c].mean));
        out.weights.push(weights[c]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RngStream;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_cloud(
        centers: &[Vec<f64>],
        per: usize,
        sd: f64,
        rng: &mut RngStream,
    ) -> SampleSet {
        let d = centers[0].len();
        let mut pts = Vec::new();
        for c in centers {
            for _ in 0..per {
                let p: Vec<f64> = c
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + sd * z
                    })
                    .collect();
                pts.push(p);
            }
        }
        let n = pts.len();
        SampleSet::from_points(d, pts, vec![0.0; n])
    }

    fn fit_default(s: &SampleSet, seed: u64) -> IgmmPosterior {
        fit_igmm(s, &IgmmPrior::default(), 1e-5, 200, &mut RngStream::new(seed, 1)).unwrap()
    }

    fn assert_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "bound decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn single_cluster_gives_one_component() {
        let mut rng = RngStream::new(1, 0);
        let c = vec![vec![2.0, -1.0]];
        let s = gaussian_cloud(&c, 1000, 1.0, &mut rng);
        let post = fit_default(&s, 3);
        assert_monotone(&post.elbo_trace);
        let w = post.weights();
        let (top, wmax) = w
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert!(*wmax >= 0.95, "weights {w:?}");
        let mean = sample_mean(&s);
        let m = &post.components[top].mean;
        let dist = ((m[0] - mean[0]).powi(2) + (m[1] - mean[1]).powi(2)).sqrt();
        assert!(dist < 0.1);
    }

    #[test]
    fn two_clusters_recovered() {
        let mut rng = RngStream::new(2, 0);
        let c = vec![vec![-5.0], vec![5.0]];
        let s = gaussian_cloud(&c, 1000, 1.0, &mut rng);
        let post = fit_default(&s, 4);
        assert_monotone(&post.elbo_trace);
        let dom = SearchDomain::cube(1, -10.0, 10.0).unwrap();
        let peaks = extract_peaks(&post, &dom, 0.02, 0.01 * dom.diagonal());
        assert_eq!(peaks.len(), 2, "{peaks:?}");
        let mut means: Vec<f64> = peaks.means.iter().map(|m| m[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 5.0).abs() < 0.2 && (means[1] - 5.0).abs() < 0.2);
        assert!(peaks.weights.iter().all(|w| *w >= 0.3));
    }

    #[test]
    fn responsibilities_are_normalized() {
        let mut rng = RngStream::new(3, 0);
        let s = gaussian_cloud(&[vec![0.0, 0.0], vec![3.0, 3.0]], 100, 0.5, &mut rng);
        for sweeps in 1..5 {
            let post =
                fit_igmm(&s, &IgmmPrior::default(), 0.0, sweeps, &mut RngStream::new(0, 0)).unwrap();
            for i in 0..s.len() {
                let sum: f64 = post.responsibility_row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
            let w: f64 = post.weights().iter().sum();
            assert!((w - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fast_bound_matches_general_bound() {
        let mut rng = RngStream::new(5, 0);
        let s = gaussian_cloud(&[vec![0.0, 1.0], vec![4.0, -2.0]], 60, 0.7, &mut rng);
        let post = fit_igmm(&s, &IgmmPrior::default(), 0.0, 7, &mut RngStream::new(1, 0)).unwrap();
        let general = elbo(&post, &s).unwrap();
        let last = *post.elbo_trace.last().unwrap();
        assert!((general - last).abs() < 1e-8 * last.abs().max(1.0));
    }

    #[test]
    fn bound_is_bit_stable() {
        let mut rng = RngStream::new(6, 0);
        let s = gaussian_cloud(&[vec![0.0]], 50, 1.0, &mut rng);
        let post = fit_default(&s, 0);
        assert_eq!(elbo(&post, &s).unwrap(), elbo(&post, &s).unwrap());
    }

    #[test]
    fn first_sweep_increases_bound() {
        let mut rng = RngStream::new(7, 0);
        let s = gaussian_cloud(&[vec![0.0, 0.0], vec![4.0, 0.0]], 200, 1.0, &mut rng);
        let post = fit_igmm(&s, &IgmmPrior::default(), 0.0, 3, &mut RngStream::new(2, 0)).unwrap();
        assert!(post.elbo_trace[1] > post.elbo_trace[0]);
    }

    #[test]
    fn too_few_samples() {
        let s = SampleSet::from_points(2, vec![vec![0.0, 0.0]; 3], vec![0.0; 3]);
        let err = fit_igmm(&s, &IgmmPrior::default(), 1e-5, 10, &mut RngStream::new(0, 0));
        assert_eq!(
            err.unwrap_err(),
            IgmmError::TooFewSamples { got: 3, needed: 4 }
        );
    }

    #[test]
    fn invalid_prior() {
        let s = SampleSet::from_points(1, vec![vec![0.0], vec![1.0], vec![2.0]], vec![0.0; 3]);
        let bad = IgmmPrior {
            truncation: 0,
            ..Default::default()
        };
        assert!(bad.resolve(&s).is_err());
        let bad = IgmmPrior {
            wishart_dof: Some(-1.0),
            ..Default::default()
        };
        assert!(bad.resolve(&s).is_err());
    }

    fn posterior_with_weights(weights: &[f64], means: &[Vec<f64>]) -> IgmmPosterior {
        // Responsibilities for 100 samples reproducing the given weights.
        let k = weights.len();
        let n = 100;
        let phi: Vec<f64> = weights.iter().flat_map(|&w| vec![w; n]).collect();
        let s = SampleSet::from_points(1, vec![vec![0.0]; n], vec![0.0; n]);
        let prior = IgmmPrior::default().resolve(&s).unwrap();
        IgmmPosterior {
            dim: 1,
            sticks: vec![(1.0, 1.0); k - 1],
            components: means
                .iter()
                .map(|m| Component {
                    mean: m.clone(),
                    mean_cov: vec![1.0],
                    dof: 3.0,
                    scale: vec![1.0],
                })
                .collect(),
            responsibilities: phi,
            elbo_trace: vec![],
            converged: true,
            prior,
        }
    }

    #[test]
    fn peaks_threshold_and_merge() {
        let dom = SearchDomain::cube(1, -10.0, 10.0).unwrap();
        let mut w = vec![0.001; 10];
        w[3] = 1.0 - 0.009;
        let means: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 - 5.0]).collect();
        let post = posterior_with_weights(&w, &means);
        let p = extract_peaks(&post, &dom, 0.02, 0.2);
        assert_eq!(p.means, vec![vec![-2.0]]);

        let post = posterior_with_weights(&[0.5, 0.5], &[vec![1.0], vec![1.05]]);
        assert_eq!(extract_peaks(&post, &dom, 0.02, 0.2).len(), 1);

        // Nothing above threshold falls back to the heaviest component.
        let post = posterior_with_weights(&[0.3, 0.7], &[vec![1.0], vec![20.0]]);
        let p = extract_peaks(&post, &dom, 0.9, 0.2);
        assert_eq!(p.means, vec![vec![10.0]]);
    }
}
