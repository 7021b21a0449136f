//! PI, EI and GP-UCB acquisition functions, and a derivative-free box
//! search used to find their global extrema.

use std::cmp::Ordering;

use libm::erfc;

use crate::domain::{ObservationSet, SearchDomain, UnitSource};
use crate::gp::{GpError, Surrogate};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_pdf(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

pub fn std_normal_cdf(u: f64) -> f64 {
    0.5 * erfc(-u / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquisitionKind {
    Pi,
    Ei,
    Ucb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    /// Exploration weight √β (UCB only).
    pub beta_sqrt: f64,
    /// Best observed outcome y⁺ (PI and EI).
    pub incumbent: f64,
}

impl AcquisitionSpec {
    pub fn pi(incumbent: f64) -> Self {
        Self {
            kind: AcquisitionKind::Pi,
            beta_sqrt: 0.0,
            incumbent,
        }
    }

    pub fn ei(incumbent: f64) -> Self {
        Self {
            kind: AcquisitionKind::Ei,
            beta_sqrt: 0.0,
            incumbent,
        }
    }

    pub fn ucb(beta_sqrt: f64) -> Self {
        assert!(beta_sqrt > 0.0, "beta-sqrt must be positive");
        Self {
            kind: AcquisitionKind::Ucb,
            beta_sqrt,
            incumbent: f64::NAN,
        }
    }

    /// Acquisition of `kind` whose incumbent is the best outcome in `data`.
    pub fn for_data(kind: AcquisitionKind, data: &ObservationSet, beta_sqrt: f64) -> Self {
        let incumbent = data.best().unwrap_or(f64::NEG_INFINITY);
        match kind {
            AcquisitionKind::Pi => Self::pi(incumbent),
            AcquisitionKind::Ei => Self::ei(incumbent),
            AcquisitionKind::Ucb => Self::ucb(beta_sqrt),
        }
    }

    /// Acquisition value from a predictive mean and standard deviation.
    pub fn from_moments(&self, mean: f64, sd: f64) -> f64 {
        match self.kind {
            AcquisitionKind::Ucb => mean + self.beta_sqrt * sd,
            AcquisitionKind::Pi => {
                if sd > 0.0 {
                    std_normal_cdf((mean - self.incumbent) / sd)
                } else if mean > self.incumbent {
                    1.0
                } else if mean < self.incumbent {
                    0.0
                } else {
                    0.5
                }
            }
            AcquisitionKind::Ei => {
                if sd > 0.0 {
                    let u = (mean - self.incumbent) / sd;
                    // The closed form can dip a hair below zero for very
                    // negative u.
                    ((mean - self.incumbent) * std_normal_cdf(u) + sd * std_normal_pdf(u)).max(0.0)
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn acq_value<S: Surrogate + ?Sized>(
    spec: &AcquisitionSpec,
    gp: &S,
    x: &[f64],
) -> Result<f64, GpError> {
    let p = gp.predict(x)?;
    let v = spec.from_moments(p.mean, p.std_dev());
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GpError::NonFinite)
    }
}

/// Budget of the multi-start search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSettings {
    /// Uniform screening points; the result is never worse than any of them.
    pub probes: usize,
    /// Local searches; `None` means `20 + 5·D`.
    pub starts: Option<usize>,
    /// Local-search evaluations per dimension, shared by all starts.
    pub budget_per_dim: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            probes: 1000,
            starts: None,
            budget_per_dim: 2000,
        }
    }
}

/// Best point found by a box search.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionMinimum {
    pub location: Vec<f64>,
    pub value: f64,
}

pub type AcquisitionMaximum = AcquisitionMinimum;

// Lower value wins; ties go to the lexicographically smaller location.
fn better(a: (&[f64], f64), b: (&[f64], f64)) -> bool {
    match a.1.partial_cmp(&b.1) {
        Some(Ordering::Less) => true,
        Some(Ordering::Greater) => false,
        _ => a.0.partial_cmp(b.0) == Some(Ordering::Less),
    }
}

fn nan_to_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Coordinate compass search from `x0`, halving all steps whenever a full
/// poll fails to improve.
fn compass<F: Fn(&[f64]) -> f64>(
    f: &F,
    domain: &SearchDomain,
    mut x: Vec<f64>,
    mut fx: f64,
    budget: usize,
) -> (Vec<f64>, f64) {
    let dim = domain.dim();
    let mut step: Vec<f64> = (0..dim).map(|d| 0.1 * domain.width(d)).collect();
    let min_step: Vec<f64> = (0..dim).map(|d| 1e-9 * domain.width(d)).collect();
    let mut used = 0;
    while used < budget && step.iter().zip(&min_step).any(|(s, m)| s > m) {
        let mut improved = false;
        'axes: for d in 0..dim {
            for sign in [1.0, -1.0] {
                let mut trial = x.clone();
                trial[d] = (x[d] + sign * step[d]).clamp(domain.lower()[d], domain.upper()[d]);
                if trial[d] == x[d] {
                    continue;
                }
                let ft = nan_to_inf(f(&trial));
                used += 1;
                if ft < fx {
                    x = trial;
                    fx = ft;
                    improved = true;
                    break;
                }
                if used >= budget {
                    break 'axes;
                }
            }
        }
        if !improved {
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
    }
    (x, fx)
}

/// Global minimization of `f` over `domain` by uniform screening followed by
/// compass searches from the best screened points.
pub fn minimize<F, R>(
    f: F,
    domain: &SearchDomain,
    rng: &mut R,
    settings: &SearchSettings,
) -> AcquisitionMinimum
where
    F: Fn(&[f64]) -> f64,
    R: UnitSource + ?Sized,
{
    let dim = domain.dim();
    let mut probes: Vec<(Vec<f64>, f64)> = (0..settings.probes.max(1))
        .map(|_| {
            let x = domain.uniform_point(rng);
            let v = nan_to_inf(f(&x));
            (x, v)
        })
        .collect();
    probes.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal))
    });
    let starts = settings.starts.unwrap_or(20 + 5 * dim).clamp(1, probes.len());
    let per_start = (settings.budget_per_dim * dim) / starts;

    let (mut best_x, mut best_v) = probes[0].clone();
    for (x0, f0) in probes.into_iter().take(starts) {
        let (x, v) = compass(&f, domain, x0, f0, per_start);
        if better((&x, v), (&best_x, best_v)) {
            best_x = x;
            best_v = v;
        }
    }
    AcquisitionMinimum {
        location: best_x,
        value: best_v,
    }
}

/// Global maximization; see [`minimize`].
pub fn maximize<F, R>(
    f: F,
    domain: &SearchDomain,
    rng: &mut R,
    settings: &SearchSettings,
) -> AcquisitionMaximum
where
    F: Fn(&[f64]) -> f64,
    R: UnitSource + ?Sized,
{
    let m = minimize(|x| -f(x), domain, rng, settings);
    AcquisitionMinimum {
        location: m.location,
        value: -m.value,
    }
}

fn search<S, R>(
    spec: &AcquisitionSpec,
    gp: &S,
    domain: &SearchDomain,
    rng: &mut R,
    sign: f64,
) -> Result<AcquisitionMinimum, GpError>
where
    S: Surrogate + ?Sized,
    R: UnitSource + ?Sized,
{
    if gp.dim() != domain.dim() {
        return Err(GpError::Dimension {
            expected: gp.dim(),
            got: domain.dim(),
        });
    }
    let settings = SearchSettings::default();
    let f = |x: &[f64]| acq_value(spec, gp, x).map_or(f64::INFINITY, |v| sign * v);
    let m = minimize(f, domain, rng, &settings);
    if !m.value.is_finite() {
        return Err(GpError::NonFinite);
    }
    Ok(AcquisitionMinimum {
        location: m.location,
        value: sign * m.value,
    })
}

/// Lowest acquisition value over the domain (the slice sampler's floor).
pub fn find_min<S, R>(
    spec: &AcquisitionSpec,
    gp: &S,
    domain: &SearchDomain,
    rng: &mut R,
) -> Result<AcquisitionMinimum, GpError>
where
    S: Surrogate + ?Sized,
    R: UnitSource + ?Sized,
{
    search(spec, gp, domain, rng, 1.0)
}

/// Highest acquisition value over the domain: the next sequential query.
pub fn find_max<S, R>(
    spec: &AcquisitionSpec,
    gp: &S,
    domain: &SearchDomain,
    rng: &mut R,
) -> Result<AcquisitionMaximum, GpError>
where
    S: Surrogate + ?Sized,
    R: UnitSource + ?Sized,
{
    search(spec, gp, domain, rng, -1.0)
}
