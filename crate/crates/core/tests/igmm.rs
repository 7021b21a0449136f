use b3o::igmm::{elbo, elbo_terms, extract_peaks, fit_igmm, IgmmPosterior, IgmmPrior};
use b3o::{RngStream, SampleSet, SearchDomain};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::{digamma, ln_gamma};

fn cloud(centers: &[[f64; 2]], total: usize, sd: f64, rng: &mut RngStream) -> SampleSet {
    let points: Vec<Vec<f64>> = (0..total)
        .map(|i| {
            let c = centers[i % centers.len()];
            let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
            vec![c[0] + sd * a, c[1] + sd * b]
        })
        .collect();
    SampleSet::from_points(2, points, vec![0.0; total])
}

fn det2(m: &[f64]) -> f64 {
    m[0] * m[3] - m[1] * m[2]
}

fn inv2(m: &[f64]) -> [f64; 4] {
    let d = det2(m);
    [m[3] / d, -m[1] / d, -m[2] / d, m[0] / d]
}

fn tr_prod2(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[2] + a[2] * b[1] + a[3] * b[3]
}

/// Straight-line evaluation of the truncated variational bound in two
/// dimensions with the prior `μ ~ N(center, I)`, `Λ ~ Wishart(ν₀, W₀)` and
/// stick-breaking weights with concentration `γ`.
fn oracle_bound(post: &IgmmPosterior, samples: &SampleSet) -> f64 {
    let d = 2.0;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let prior = &post.prior;
    let g = prior.concentration;
    let k = post.components.len();
    let n = samples.len();
    let ln_gamma2 = |a: f64| 0.5 * std::f64::consts::PI.ln() + ln_gamma(a) + ln_gamma(a - 0.5);
    let ln_wnorm = |w: &[f64], nu: f64| -0.5 * nu * det2(w).ln() - nu * 2f64.ln() - ln_gamma2(nu / 2.0);
    let e_logdet = |w: &[f64], nu: f64| digamma(nu / 2.0) + digamma((nu - 1.0) / 2.0) + d * 2f64.ln() + det2(w).ln();

    let mut e_ln_pi = vec![0.0; k];
    let mut rest = 0.0;
    for j in 0..k {
        let (ln_v, ln_1mv) = match post.sticks.get(j) {
            Some(&(a, b)) => (digamma(a) - digamma(a + b), digamma(b) - digamma(a + b)),
            None => (0.0, f64::NEG_INFINITY),
        };
        e_ln_pi[j] = ln_v + rest;
        rest += ln_1mv;
    }

    let mut total = 0.0;
    for &(a, b) in &post.sticks {
        let ln_1mv = digamma(b) - digamma(a + b);
        let ln_v = digamma(a) - digamma(a + b);
        total += g.ln() + (g - 1.0) * ln_1mv;
        total -= (a - 1.0) * ln_v + (b - 1.0) * ln_1mv - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    }
    let w0_inv = inv2(&prior.scale);
    for c in &post.components {
        let el = e_logdet(&c.scale, c.dof);
        let dm = [c.mean[0] - prior.mean_center[0], c.mean[1] - prior.mean_center[1]];
        total += -ln2pi - 0.5 * (dm[0] * dm[0] + dm[1] * dm[1] + c.mean_cov[0] + c.mean_cov[3]);
        total += 1.0 + ln2pi + 0.5 * det2(&c.mean_cov).ln();
        total += ln_wnorm(&prior.scale, prior.dof) + 0.5 * (prior.dof - 3.0) * el
            - 0.5 * c.dof * tr_prod2(&w0_inv, &c.scale);
        total += -ln_wnorm(&c.scale, c.dof) - 0.5 * (c.dof - 3.0) * el + c.dof;
    }
    for (i, x) in samples.points().iter().enumerate() {
        for (j, c) in post.components.iter().enumerate() {
            let phi = post.responsibilities[j * n + i];
            if phi == 0.0 {
                continue;
            }
            let dx = [x[0] - c.mean[0], x[1] - c.mean[1]];
            let w = &c.scale;
            let quad = dx[0] * (w[0] * dx[0] + w[1] * dx[1]) + dx[1] * (w[2] * dx[0] + w[3] * dx[1]);
            let expected_quad = c.dof * (quad + tr_prod2(w, &c.mean_cov));
            total += phi * (0.5 * e_logdet(w, c.dof) - ln2pi - 0.5 * expected_quad);
            total += phi * e_ln_pi[j];
            total -= phi * phi.ln();
        }
    }
    total
}

#[test]
fn bound_matches_straight_line_oracle() {
    let mut rng = RngStream::new(1, 0);
    let samples = cloud(&[[0.0, 0.0], [2.0, 1.0]], 10, 0.7, &mut rng);
    for sweeps in [1, 2, 5, 50] {
        let post = fit_igmm(&samples, &IgmmPrior::default(), 0.0, sweeps, &mut rng.derive(sweeps as u64)).unwrap();
        let a = elbo(&post, &samples).unwrap();
        let b = oracle_bound(&post, &samples);
        assert!((a - b).abs() <= 1e-8, "sweeps {sweeps}: {a} vs {b}");
    }
    // An arbitrary state, not produced by a fit.
    let mut post = fit_igmm(&samples, &IgmmPrior::default(), 0.0, 3, &mut rng).unwrap();
    for (j, c) in post.components.iter_mut().enumerate() {
        c.mean[0] += 0.1 * j as f64;
        c.mean_cov = vec![0.5, 0.1, 0.1, 0.4];
        c.dof += 0.3;
    }
    let a = elbo(&post, &samples).unwrap();
    let b = oracle_bound(&post, &samples);
    assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
}

#[test]
fn bound_is_monotone_on_many_datasets() {
    let mut rng = RngStream::new(2, 0);
    for set in 0..50 {
        let clusters = 1 + set % 4;
        let centers: Vec<[f64; 2]> = (0..clusters)
            .map(|_| [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)])
            .collect();
        let n = rng.random_range(20..400);
        let samples = cloud(&centers, n, rng.random_range(0.2..2.0), &mut rng);
        let post = fit_igmm(&samples, &IgmmPrior::default(), 1e-5, 200, &mut rng.derive(set)).unwrap();
        for w in post.elbo_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "dataset {set}: {} then {}", w[0], w[1]);
        }
        let weights: f64 = post.weights().iter().sum();
        assert!((weights - 1.0).abs() < 1e-9);
        for i in 0..samples.len() {
            let row: f64 = post.responsibility_row(i).iter().sum();
            assert!((row - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn label_symmetric_terms_survive_permutation() {
    let mut rng = RngStream::new(3, 0);
    let samples = cloud(&[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]], 300, 1.0, &mut rng);
    let post = fit_igmm(&samples, &IgmmPrior::default(), 1e-5, 30, &mut rng).unwrap();
    let k = post.truncation();
    let n = samples.len();
    let order: Vec<usize> = (0..k).rev().collect();
    let mut permuted = post.clone();
    permuted.components = order.iter().map(|&c| post.components[c].clone()).collect();
    permuted.responsibilities = order
        .iter()
        .flat_map(|&c| post.responsibilities[c * n..(c + 1) * n].to_vec())
        .collect();
    let a = elbo_terms(&post, &samples).unwrap();
    let b = elbo_terms(&permuted, &samples).unwrap();
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs());
    assert!(close(a.log_p_means, b.log_p_means));
    assert!(close(a.log_p_precisions, b.log_p_precisions));
    assert!(close(a.entropy_means, b.entropy_means));
    assert!(close(a.entropy_precisions, b.entropy_precisions));
    assert!(close(a.entropy_assignments, b.entropy_assignments));
}

fn sorted_peaks(post: &IgmmPosterior, domain: &SearchDomain) -> Vec<Vec<f64>> {
    let mut means = extract_peaks(post, domain, 0.02, 0.01 * domain.diagonal()).means;
    means.sort_by(|a, b| a[0].total_cmp(&b[0]));
    means
}

#[test]
fn truncation_level_does_not_change_the_answer() {
    let domain = SearchDomain::cube(2, -10.0, 10.0).unwrap();
    let mut rng = RngStream::new(4, 0);
    let samples = cloud(&[[-5.0, 0.0], [5.0, 2.0]], 2000, 1.0, &mut rng);
    let fit = |k: usize| {
        let prior = IgmmPrior {
            truncation: k,
            ..Default::default()
        };
        fit_igmm(&samples, &prior, 1e-5, 200, &mut RngStream::new(4, 1)).unwrap()
    };
    let (a, b) = (sorted_peaks(&fit(10), &domain), sorted_peaks(&fit(20), &domain));
    assert_eq!(a.len(), 2);
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(&b) {
        assert!(p.iter().zip(q).all(|(x, y)| (x - y).abs() < 0.1), "{a:?} vs {b:?}");
    }
}

#[test]
fn translation_moves_the_means() {
    let mut rng = RngStream::new(5, 0);
    let samples = cloud(&[[-4.0, 0.0], [4.0, 1.0]], 600, 1.0, &mut rng);
    let shift = [3.25, -1.5];
    let moved: Vec<Vec<f64>> = samples
        .points()
        .iter()
        .map(|p| vec![p[0] + shift[0], p[1] + shift[1]])
        .collect();
    let moved = SampleSet::from_points(2, moved, vec![0.0; samples.len()]);
    let a = fit_igmm(&samples, &IgmmPrior::default(), 1e-5, 200, &mut RngStream::new(5, 1)).unwrap();
    let b = fit_igmm(&moved, &IgmmPrior::default(), 1e-5, 200, &mut RngStream::new(5, 1)).unwrap();
    assert_eq!(a.weights().len(), b.weights().len());
    for (wa, wb) in a.weights().iter().zip(b.weights()) {
        assert!((wa - wb).abs() < 1e-6);
    }
    for (ca, cb) in a.components.iter().zip(&b.components) {
        for j in 0..2 {
            assert!((ca.mean[j] + shift[j] - cb.mean[j]).abs() < 1e-6);
        }
    }
}

#[test]
fn three_clusters_give_three_peaks() {
    let domain = SearchDomain::cube(2, -5.0, 11.0).unwrap();
    let truth = [[0.0, 0.0], [6.0, 0.0], [3.0, 6.0]];
    let mut rng = RngStream::new(6, 0);
    let samples = cloud(&truth, 2000, 1.0, &mut rng);
    let post = fit_igmm(&samples, &IgmmPrior::default(), 1e-5, 200, &mut rng).unwrap();
    let peaks = extract_peaks(&post, &domain, 0.02, 0.01 * domain.diagonal());
    assert_eq!(peaks.len(), 3);
    for t in truth {
        assert!(peaks
            .means
            .iter()
            .any(|m| ((m[0] - t[0]).powi(2) + (m[1] - t[1]).powi(2)).sqrt() < 0.2));
    }
}
