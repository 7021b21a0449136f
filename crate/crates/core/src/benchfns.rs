//! Synthetic test objectives with their domains and known optima.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::SearchDomain;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("point has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("point lies outside the domain")]
    OutOfDomain,
    #[error("unknown benchmark `{name}` (valid: {valid})")]
    Unknown { name: String, valid: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Min,
    Max,
}

/// `(6x - 2)² sin(12x - 4)` on `[0, 1]`.
pub fn forrester(x: f64) -> f64 {
    (6.0 * x - 2.0).powi(2) * (12.0 * x - 4.0).sin()
}

/// Drop-wave on `[-5.12, 5.12]²`; minimum -1 at the origin.
pub fn dropwave(x: &[f64]) -> f64 {
    let r2 = x[0] * x[0] + x[1] * x[1];
    -(1.0 + (12.0 * r2.sqrt()).cos()) / (0.5 * r2 + 2.0)
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];

// Standard constants from the global optimization test-function literature
// (Dixon and Szegő).
const HARTMANN3_A: [[f64; 3]; 4] = [
    [3.0, 10.0, 30.0],
    [0.1, 10.0, 35.0],
    [3.0, 10.0, 30.0],
    [0.1, 10.0, 35.0],
];
const HARTMANN3_P: [[f64; 3]; 4] = [
    [0.3689, 0.1170, 0.2673],
    [0.4699, 0.4387, 0.7470],
    [0.1091, 0.8732, 0.5547],
    [0.0381, 0.5743, 0.8828],
];
const HARTMANN6_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMANN6_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

pub const HARTMANN3_ARGMIN: [f64; 3] = [0.114614, 0.555649, 0.852547];
pub const HARTMANN6_ARGMIN: [f64; 6] = [0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573];

fn hartmann_sum<const D: usize>(x: &[f64], a: &[[f64; D]; 4], p: &[[f64; D]; 4]) -> f64 {
    -(0..4)
        .map(|i| {
            let inner: f64 = (0..D).map(|j| a[i][j] * (x[j] - p[i][j]).powi(2)).sum();
            HARTMANN_ALPHA[i] * (-inner).exp()
        })
        .sum::<f64>()
}

/// Hartmann function in 3 or 6 dimensions on the unit cube.
pub fn hartmann(x: &[f64]) -> f64 {
    match x.len() {
        3 => hartmann_sum(x, &HARTMANN3_A, &HARTMANN3_P),
        6 => hartmann_sum(x, &HARTMANN6_A, &HARTMANN6_P),
        d => panic!("hartmann is defined for 3 or 6 dimensions, got {d}"),
    }
}

/// `∏ sin(x_i) √x_i` on `[0, 10]^D`.
pub fn alpine2(x: &[f64]) -> f64 {
    x.iter().map(|v| v.sin() * v.sqrt()).product()
}

/// `∏ (|4x_i - 2| + 1) / 2` on `[-4, 6]^D`.
pub fn gsobol(x: &[f64]) -> f64 {
    let a = 1.0;
    x.iter().map(|v| ((4.0 * v - 2.0).abs() + a) / (1.0 + a)).product()
}

/// A registered test objective.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: &'static str,
    pub dim: usize,
    pub domain: SearchDomain,
    pub sense: Sense,
    /// True optimum of `evaluate` over the domain.
    pub optimum: f64,
    /// Optimum as commonly tabulated, when it differs from `optimum`.
    pub reported_optimum: f64,
    func: fn(&[f64]) -> f64,
}

impl Benchmark {
    /// Registry key, e.g. `hartmann-3`.
    pub fn key(&self) -> String {
        format!("{}-{}", self.name, self.dim)
    }

    /// Raw objective value; errors on wrong dimension or out-of-domain input.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64, BenchError> {
        if x.len() != self.dim {
            return Err(BenchError::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !self.domain.contains(x) {
            return Err(BenchError::OutOfDomain);
        }
        Ok((self.func)(x))
    }

    /// The objective in maximization form: `-f` for minimization problems.
    pub fn maximization_target(&self, x: &[f64]) -> Result<f64, BenchError> {
        let v = self.evaluate(x)?;
        Ok(match self.sense {
            Sense::Min => -v,
            Sense::Max => v,
        })
    }

    /// Convert a value in maximization form back to the native sense.
    pub fn to_native(&self, v: f64) -> f64 {
        match self.sense {
            Sense::Min => -v,
            Sense::Max => v,
        }
    }
}

fn forrester_vec(x: &[f64]) -> f64 {
    forrester(x[0])
}

/// All registry keys.
pub const KEYS: [&str; 8] = [
    "forrester-1",
    "dropwave-2",
    "hartmann-3",
    "hartmann-6",
    "alpine2-5",
    "alpine2-10",
    "gsobol-5",
    "gsobol-10",
];

/// Look up a benchmark by its `name-dim` key.
pub fn lookup(key: &str) -> Result<Benchmark, BenchError> {
    let cube = |d: usize, lo: f64, hi: f64| SearchDomain::cube(d, lo, hi).expect("valid box");
    let b = |name, dim, domain, sense, optimum, reported_optimum, func| Benchmark {
        name,
        dim,
        domain,
        sense,
        optimum,
        reported_optimum,
        func,
    };
    let alpine_opt = |d: i32| 2.808f64.powi(d);
    Ok(match key {
        "forrester-1" => b("forrester", 1, cube(1, 0.0, 1.0), Sense::Min, -6.02074, -6.0, forrester_vec as fn(&[f64]) -> f64),
        "dropwave-2" => b("dropwave", 2, cube(2, -5.12, 5.12), Sense::Min, -1.0, -1.0, dropwave),
        "hartmann-3" => b("hartmann", 3, cube(3, 0.0, 1.0), Sense::Min, -3.86278, -3.86276, hartmann),
        "hartmann-6" => b("hartmann", 6, cube(6, 0.0, 1.0), Sense::Min, -3.32237, -3.32237, hartmann),
        "alpine2-5" => b("alpine2", 5, cube(5, 0.0, 10.0), Sense::Max, alpine_opt(5), -alpine_opt(5), alpine2),
        "alpine2-10" => b("alpine2", 10, cube(10, 0.0, 10.0), Sense::Max, alpine_opt(10), -alpine_opt(10), alpine2),
        "gsobol-5" => b("gsobol", 5, cube(5, -4.0, 6.0), Sense::Min, 0.5f64.powi(5), 0.0, gsobol),
        "gsobol-10" => b("gsobol", 10, cube(10, -4.0, 6.0), Sense::Min, 0.5f64.powi(10), 0.0, gsobol),
        _ => {
            return Err(BenchError::Unknown {
                name: key.to_string(),
                valid: KEYS.join(", "),
            })
        }
    })
}

/// Every registered benchmark, in registry order.
pub fn all() -> Vec<Benchmark> {
    KEYS.iter().map(|k| lookup(k).expect("registered")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forrester_values() {
        assert_eq!(forrester(1.0 / 3.0).abs() < 1e-15, true);
        assert!((forrester(0.0) - 4.0 * (-4f64).sin()).abs() < 1e-12);
        assert!((forrester(0.0) - 3.0272).abs() < 1e-4);
        let min = (0..=100_000)
            .map(|i| forrester(i as f64 / 100_000.0))
            .fold(f64::INFINITY, f64::min);
        assert!((min - -6.0).abs() < 0.03);
        assert!((min - lookup("forrester-1").unwrap().optimum).abs() < 1e-4);
    }

    #[test]
    fn dropwave_values() {
        assert_eq!(dropwave(&[0.0, 0.0]), -1.0);
        let r = std::f64::consts::PI / 12.0;
        assert!(dropwave(&[r, 0.0]).abs() < 1e-15);
        let (a, b) = (0.7, -1.3);
        assert_eq!(dropwave(&[a, b]), dropwave(&[b, a]));
        assert_eq!(dropwave(&[a, b]), dropwave(&[-a, -b]));
    }

    #[test]
    fn hartmann_optima() {
        assert!((hartmann(&HARTMANN3_ARGMIN) - -3.86278).abs() < 1e-4);
        assert!((hartmann(&HARTMANN6_ARGMIN) - -3.32237).abs() < 1e-4);
        assert!(hartmann(&[0.5; 3]) > -8.4 && hartmann(&[0.5; 3]) < 0.0);
    }

    #[test]
    fn alpine2_values() {
        assert_eq!(alpine2(&[0.0, 3.0, 4.0]), 0.0);
        let best = (0..=100_000)
            .map(|i| alpine2(&[10.0 * i as f64 / 100_000.0]))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((best - 2.808).abs() < 1e-3);
        assert!((alpine2(&[7.917]) - 2.808).abs() < 1e-3);
    }

    #[test]
    fn gsobol_values() {
        assert!((gsobol(&[0.5; 5]) - 0.03125).abs() < 1e-15);
        assert!((gsobol(&[0.0; 4]) - 1.5f64.powi(4)).abs() < 1e-12);
    }

    #[test]
    fn registry() {
        for k in KEYS {
            let b = lookup(k).unwrap();
            assert_eq!(b.key(), k);
            assert_eq!(b.domain.dim(), b.dim);
        }
        let err = lookup("branin-2").unwrap_err();
        assert!(err.to_string().contains("forrester-1"));
        let b = lookup("hartmann-3").unwrap();
        assert!(b.evaluate(&[0.5, 0.5]).is_err());
        assert_eq!(b.evaluate(&[1.5, 0.5, 0.5]), Err(BenchError::OutOfDomain));
    }
}
