//! Batch generalized slice sampling: draws points with density proportional
//! to `α(x) - α_min` over a box by running many short, independent
//! slice-sampling chains with uniform proposals.

use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{RngStream, SearchDomain, UnitSource};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("sampler produced {got} points, at least {needed} required")]
    TooFewSamples { got: usize, needed: usize },
    #[error("invalid sampler configuration: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Number of independent chains `M`.
    pub chains: usize,
    /// Slice iterations per chain.
    pub max_iter: usize,
    /// Proposals per slice before the level is redrawn.
    pub rejection_cap: usize,
    /// Below this height above `α_min` the slice counts as empty.
    pub flat_epsilon: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 200,
            max_iter: 50,
            rejection_cap: 1000,
            flat_epsilon: 1e-9,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.chains == 0 {
            return Err(SamplerError::Config("chains must be positive"));
        }
        if self.max_iter == 0 {
            return Err(SamplerError::Config("max-iter must be positive"));
        }
        if self.rejection_cap == 0 {
            return Err(SamplerError::Config("rejection cap must be positive"));
        }
        Ok(())
    }
}

/// Accepted points with their acquisition values, stored chain-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    dim: usize,
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    chain_lengths: Vec<usize>,
}

impl SampleSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    /// Wrap externally produced points (single block).
    pub fn from_points(dim: usize, points: Vec<Vec<f64>>, values: Vec<f64>) -> Self {
        assert_eq!(points.len(), values.len());
        assert!(points.iter().all(|p| p.len() == dim));
        let n = points.len();
        Self {
            dim,
            points,
            values,
            chain_lengths: vec![n],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of points contributed by each chain, in pooling order.
    pub fn chain_lengths(&self) -> &[usize] {
        &self.chain_lengths
    }

    /// Points of chain `c`.
    pub fn chain(&self, c: usize) -> &[Vec<f64>] {
        let start: usize = self.chain_lengths[..c].iter().sum();
        &self.points[start..start + self.chain_lengths[c]]
    }

    fn append(&mut self, other: SampleSet) {
        self.chain_lengths.push(other.points.len());
        self.points.extend(other.points);
        self.values.extend(other.values);
    }
}

/// One generalized slice-sampling chain.
///
/// Starts from a uniform point; each iteration draws a level
/// `u ~ U(α_min, α(s_prev))` and then uniform proposals until one has
/// `α(s) > u`, which is accepted and becomes the new state. The level is
/// held fixed while proposals are drawn. After `rejection_cap` proposals the
/// level is redrawn on the next iteration; three such failures in a row end
/// the chain early.
pub fn gss_chain<F, R>(
    acq: &F,
    domain: &SearchDomain,
    alpha_min: f64,
    config: &SamplerConfig,
    rng: &mut R,
) -> SampleSet
where
    F: Fn(&[f64]) -> f64 + ?Sized,
    R: UnitSource + ?Sized,
{
    let mut out = SampleSet::new(domain.dim());
    let start = domain.uniform_point(rng);
    let mut prev_value = acq(&start);
    let mut cap_hits = 0;

    for _ in 0..config.max_iter {
        let height = prev_value - alpha_min;
        if !(height >= config.flat_epsilon) {
            // Empty slice: take the next proposal as is.
            let s = domain.uniform_point(rng);
            let v = acq(&s);
            out.points.push(s);
            out.values.push(v);
            prev_value = v;
            cap_hits = 0;
            continue;
        }
        let level = rng.uniform(alpha_min, prev_value);
        let mut accepted = None;
        for _ in 0..config.rejection_cap {
            let s = domain.uniform_point(rng);
            let v = acq(&s);
            if v > level {
                accepted = Some((s, v));
                break;
            }
        }
        match accepted {
            Some((s, v)) => {
                out.points.push(s);
                out.values.push(v);
                prev_value = v;
                cap_hits = 0;
            }
            None => {
                cap_hits += 1;
                if cap_hits == 3 {
                    break;
                }
            }
        }
    }
    let n = out.points.len();
    out.chain_lengths.push(n);
    out
}

/// Pool of `config.chains` independent chains; chain `c` runs on
/// `rng.derive(c)`.
pub fn bgss<F>(
    acq: &F,
    domain: &SearchDomain,
    alpha_min: f64,
    config: &SamplerConfig,
    rng: &RngStream,
) -> Result<SampleSet, SamplerError>
where
    F: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    let streams: Vec<RngStream> = (0..config.chains as u64).map(|c| rng.derive(c)).collect();
    let pooled = bgss_with_streams(acq, domain, alpha_min, config, streams)?;
    let needed = domain.dim() + 2;
    if pooled.len() < needed {
        return Err(SamplerError::TooFewSamples {
            got: pooled.len(),
            needed,
        });
    }
    Ok(pooled)
}

/// Run one chain per given stream and pool them in stream order.
pub fn bgss_with_streams<F>(
    acq: &F,
    domain: &SearchDomain,
    alpha_min: f64,
    config: &SamplerConfig,
    streams: Vec<RngStream>,
) -> Result<SampleSet, SamplerError>
where
    F: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    config.validate()?;
    let chains: Vec<SampleSet> = streams
        .into_par_iter()
        .map(|mut s| gss_chain(acq, domain, alpha_min, config, &mut s))
        .collect();
    let mut pooled = SampleSet::new(domain.dim());
    for c in chains {
        pooled.append(c);
    }
    Ok(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted(std::vec::IntoIter<f64>);

    impl UnitSource for Scripted {
        fn unit(&mut self) -> f64 {
            self.0.next().expect("script exhausted")
        }
    }

    fn triangle(x: &[f64]) -> f64 {
        1.0 - 2.0 * (x[0] - 0.5).abs()
    }

    fn histogram_tv(points: &[Vec<f64>], bins: usize, cdf: impl Fn(f64) -> f64) -> f64 {
        let mut counts = vec![0usize; bins];
        for p in points {
            let b = ((p[0] * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let n = points.len() as f64;
        (0..bins)
            .map(|b| {
                let lo = b as f64 / bins as f64;
                let hi = (b + 1) as f64 / bins as f64;
                (counts[b] as f64 / n - (cdf(hi) - cdf(lo))).abs()
            })
            .sum::<f64>()
            * 0.5
    }

    #[test]
    fn figure_three_replay() {
        // α(x) = x on [0, 1], α_min = 0.
        let acq = |x: &[f64]| x[0];
        let dom = SearchDomain::unit(1).unwrap();
        let cfg = SamplerConfig {
            max_iter: 1,
            ..Default::default()
        };
        // s1 = 0.8, u1 = 0.5·0.8 = 0.4, s2 = 0.3 (rejected), s3 = 0.6 (accepted).
        let mut script = Scripted(vec![0.8, 0.5, 0.3, 0.6].into_iter());
        let out = gss_chain(&acq, &dom, 0.0, &cfg, &mut script);
        assert_eq!(out.points(), &[vec![0.6]]);
        assert!(script.0.next().is_none());
    }

    #[test]
    fn flat_surface_accepts_everything() {
        let acq = |_: &[f64]| 3.0;
        let dom = SearchDomain::unit(1).unwrap();
        let cfg = SamplerConfig {
            max_iter: 4,
            ..Default::default()
        };
        // s0, then one proposal per iteration.
        let mut script = Scripted(vec![0.5, 0.1, 0.2, 0.3, 0.4].into_iter());
        let out = gss_chain(&acq, &dom, 3.0, &cfg, &mut script);
        assert_eq!(
            out.points(),
            &[vec![0.1], vec![0.2], vec![0.3], vec![0.4]]
        );
    }

    #[test]
    fn triangle_density_recovered() {
        let dom = SearchDomain::unit(1).unwrap();
        let cfg = SamplerConfig {
            chains: 200,
            max_iter: 50,
            ..Default::default()
        };
        let s = bgss(&triangle, &dom, 0.0, &cfg, &RngStream::new(11, 0)).unwrap();
        assert_eq!(s.len(), 10_000);
        let cdf = |x: f64| {
            if x <= 0.5 {
                2.0 * x * x
            } else {
                1.0 - 2.0 * (1.0 - x) * (1.0 - x)
            }
        };
        let tv = histogram_tv(s.points(), 20, cdf);
        assert!(tv < 0.05, "tv {tv}");
        assert!(s.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn single_chain_matches_gss_chain() {
        let dom = SearchDomain::unit(1).unwrap();
        let cfg = SamplerConfig {
            chains: 1,
            max_iter: 30,
            ..Default::default()
        };
        let root = RngStream::new(5, 9);
        let pooled = bgss(&triangle, &dom, 0.0, &cfg, &root).unwrap();
        let single = gss_chain(&triangle, &dom, 0.0, &cfg, &mut root.derive(0));
        assert_eq!(pooled.points(), single.points());
    }

    #[test]
    fn permuted_streams_permute_blocks() {
        let dom = SearchDomain::unit(1).unwrap();
        let cfg = SamplerConfig {
            chains: 4,
            max_iter: 10,
            ..Default::default()
        };
        let root = RngStream::new(3, 3);
        let streams: Vec<RngStream> = (0..4).map(|c| root.derive(c)).collect();
        let a = bgss_with_streams(&triangle, &dom, 0.0, &cfg, streams.clone()).unwrap();
        let perm = [2, 0, 3, 1];
        let b = bgss_with_streams(
            &triangle,
            &dom,
            0.0,
            &cfg,
            perm.iter().map(|&i| streams[i].clone()).collect(),
        )
        .unwrap();
        for (slot, &orig) in perm.iter().enumerate() {
            assert_eq!(b.chain(slot), a.chain(orig));
        }
    }

    #[test]
    fn stalled_chain_terminates() {
        // Accept region has measure zero: only x == 1 exceeds any level.
        let acq = |x: &[f64]| if x[0] >= 1.0 { 1.0 } else { 0.0 };
        let dom = SearchDomain::unit(1).unwrap();
        let cfg = SamplerConfig {
            chains: 1,
            max_iter: 50,
            rejection_cap: 10,
            flat_epsilon: 1e-9,
        };
        // Start on the spike so the slice is non-empty.
        let mut script = Scripted(
            std::iter::once(1.0)
                .chain(std::iter::repeat(0.5).take(3 * 11))
                .collect::<Vec<_>>()
                .into_iter(),
        );
        let out = gss_chain(&acq, &dom, 0.0, &cfg, &mut script);
        assert!(out.is_empty());
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let dom = SearchDomain::unit(3).unwrap();
        let cfg = SamplerConfig {
            chains: 1,
            max_iter: 2,
            ..Default::default()
        };
        let err = bgss(&|x: &[f64]| x[0], &dom, 0.0, &cfg, &RngStream::new(0, 0)).unwrap_err();
        assert_eq!(err, SamplerError::TooFewSamples { got: 2, needed: 5 });
    }
}
