//! Dense Cholesky factorization for the small symmetric systems used by the
//! GP and the mixture fit. Row-major storage throughout.

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("matrix is not positive definite (pivot {pivot}, value {value:e})")]
pub struct NotPositiveDefinite {
    pub pivot: usize,
    pub value: f64,
}

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factor the `n × n` row-major symmetric matrix `a`. Only the lower
    /// triangle is read.
    pub fn new(a: &[f64], n: usize) -> Result<Self, NotPositiveDefinite> {
        assert_eq!(a.len(), n * n, "matrix shape");
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(NotPositiveDefinite { pivot: i, value: s });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.n + j]
    }

    /// Solve `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, x)| l * x).sum();
            b[i] = (b[i] - s) / self.l[i * n + i];
        }
    }

    /// Solve `Lᵀ x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }

    /// `A⁻¹` as a row-major matrix.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        // Symmetrize away rounding asymmetry.
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (inv[i * n + j] + inv[j * n + i]);
                inv[i * n + j] = m;
                inv[j * n + i] = m;
            }
        }
        inv
    }

    /// Factor of the bordered matrix `[[A, c], [cᵀ, d]]` from the factor of
    /// `A`, in `O(n²)`.
    pub fn extend(&self, c: &[f64], d: f64) -> Result<Self, NotPositiveDefinite> {
        let n = self.n;
        assert_eq!(c.len(), n, "border length");
        let mut row = c.to_vec();
        self.solve_lower_in_place(&mut row);
        let s = d - row.iter().map(|v| v * v).sum::<f64>();
        if !(s > 0.0) || !s.is_finite() {
            return Err(NotPositiveDefinite { pivot: n, value: s });
        }
        let m = n + 1;
        let mut l = vec![0.0; m * m];
        for i in 0..n {
            l[i * m..i * m + i + 1].copy_from_slice(&self.l[i * n..i * n + i + 1]);
        }
        l[n * m..n * m + n].copy_from_slice(&row);
        l[n * m + n] = s.sqrt();
        Ok(Self { n: m, l })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Vec<f64> {
        // B Bᵀ + n I for a fixed B.
        let b: Vec<f64> = (0..n * n).map(|k| ((k * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum::<f64>();
            }
            a[i * n + i] += n as f64;
        }
        a
    }

    #[test]
    fn reconstructs_and_solves() {
        let n = 6;
        let a = spd(n);
        let ch = Cholesky::new(&a, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| ch.get(i, k) * ch.get(j, k)).sum();
                assert!((v - a[i * n + j]).abs() < 1e-12);
            }
        }
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let x = ch.solve(&b);
        for i in 0..n {
            let v: f64 = (0..n).map(|j| a[i * n + j] * x[j]).sum();
            assert!((v - b[i]).abs() < 1e-10);
        }
        let inv = ch.inverse();
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| a[i * n + k] * inv[k * n + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn log_det_of_diagonal() {
        let a = vec![2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 5.0];
        let ch = Cholesky::new(&a, 3).unwrap();
        assert!((ch.log_det() - 30f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn singular_reports_pivot() {
        let a = vec![1.0, 1.0, 1.0, 1.0];
        let err = Cholesky::new(&a, 2).unwrap_err();
        assert_eq!(err.pivot, 1);
    }

    #[test]
    fn extend_matches_full_factorization() {
        let n = 5;
        let a = spd(n);
        let sub: Vec<f64> = (0..n - 1)
            .flat_map(|i| a[i * n..i * n + n - 1].to_vec())
            .collect();
        let small = Cholesky::new(&sub, n - 1).unwrap();
        let c: Vec<f64> = (0..n - 1).map(|i| a[i * n + n - 1]).collect();
        let ext = small.extend(&c, a[n * n - 1]).unwrap();
        let full = Cholesky::new(&a, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!((ext.get(i, j) - full.get(i, j)).abs() < 1e-12);
            }
        }
    }
}
