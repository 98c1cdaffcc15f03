//! Covariance of Zernike coefficients for Kolmogorov phase over a circular aperture.

use crate::error::{invalid, Error, Result};
use crate::zernike::ZernikePolynomial;
use statrs::function::gamma::gamma;

/// Covariance `E[a_i a_j]` at `D/r0 = 1` for Noll indices `i, j >= 2`.
///
/// Zero when the azimuthal orders differ or, for `m > 0`, when the two modes
/// sit on different (cos/sin) branches.
pub fn noll_entry(i: usize, j: usize) -> Result<f64> {
    let zi = ZernikePolynomial::from_noll(i)?;
    let zj = ZernikePolynomial::from_noll(j)?;
    if i == 1 || j == 1 {
        return Ok(0.0);
    }
    if zi.m != zj.m {
        return Ok(0.0);
    }
    if zi.m != 0 && zi.branch != zj.branch {
        return Ok(0.0);
    }
    let (n, np) = (zi.n as f64, zj.n as f64);
    let sign_exp = ((zi.n + zj.n - 2 * zi.m) / 2) as i32;
    let k = 2.2698 * (-1f64).powi(sign_exp) * ((n + 1.0) * (np + 1.0)).sqrt();
    let num = gamma((n + np - 5.0 / 3.0) / 2.0);
    let den = gamma((n - np + 17.0 / 3.0) / 2.0)
        * gamma((np - n + 17.0 / 3.0) / 2.0)
        * gamma((n + np + 23.0 / 3.0) / 2.0);
    Ok(k * num / den)
}

#[derive(Debug, Clone)]
pub struct NollMatrix {
    pub n: usize,
    pub d_over_r0: f64,
    /// Row-major `n × n`, index 0 is piston.
    pub entries: Vec<f64>,
    /// Lower-triangular factor, row-major `n × n`.
    pub cholesky: Vec<f64>,
    /// Diagonal shift added before factorization, 0 when none was needed.
    pub regularization: f64,
}

impl NollMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    #[inline]
    pub fn l(&self, i: usize, j: usize) -> f64 {
        self.cholesky[i * self.n + j]
    }

    /// Largest absolute deviation of `L Lᵀ` from the entries.
    pub fn factor_residual(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.l(i, k) * self.l(j, k)).sum();
                worst = worst.max((s - self.get(i, j)).abs());
            }
        }
        worst
    }
}

/// Noll matrix for `n` modes scaled by `(D/r0)^{5/3}`. Piston carries zero variance.
pub fn noll_covariance(n: usize, d_over_r0: f64) -> Result<NollMatrix> {
    if n < 3 {
        return invalid(format!("need at least 3 modes, got {n}"));
    }
    if !(d_over_r0 >= 0.0 && d_over_r0.is_finite()) {
        return invalid(format!("d_over_r0 must be finite and non-negative, got {d_over_r0}"));
    }
    let scale = d_over_r0.powf(5.0 / 3.0);
    let mut entries = vec![0.0; n * n];
    for i in 2..=n {
        for j in i..=n {
            let v = noll_entry(i, j)? * scale;
            entries[(i - 1) * n + (j - 1)] = v;
            entries[(j - 1) * n + (i - 1)] = v;
        }
    }
    let (cholesky, regularization) = if scale == 0.0 {
        (vec![0.0; n * n], 0.0)
    } else {
        factor_without_piston(&entries, n)?
    };
    Ok(NollMatrix { n, d_over_r0, entries, cholesky, regularization })
}

fn factor_without_piston(entries: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let m = n - 1;
    let block = nalgebra::DMatrix::from_fn(m, m, |r, c| entries[(r + 1) * n + (c + 1)]);
    let (l, shift) = match block.clone().cholesky() {
        Some(ch) => (ch.l(), 0.0),
        None => {
            let shift = 1e-12 * block.trace() / m as f64;
            log::warn!("Noll matrix not positive definite; adding {shift:e} to the diagonal");
            let reg = &block + nalgebra::DMatrix::identity(m, m) * shift;
            let ch = reg.cholesky().ok_or_else(|| {
                Error::Numeric(format!(
                    "Cholesky failed after regularization (n={n}, trace={:e}, min diag={:e})",
                    block.trace(),
                    block.diagonal().min()
                ))
            })?;
            (ch.l(), shift)
        }
    };
    let mut out = vec![0.0; n * n];
    for r in 0..m {
        for c in 0..=r {
            out[(r + 1) * n + (c + 1)] = l[(r, c)];
        }
    }
    Ok((out, shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tilt_variance_and_zero_pattern() {
        let a = noll_covariance(36, 1.0).unwrap();
        assert_eq!(a.get(1, 2), 0.0);
        // Noll's tabulated residuals give (1.0299 - 0.134)/2 = 0.448 for each tilt.
        assert_relative_eq!(a.get(1, 1), 0.448, max_relative = 0.015);
        assert_relative_eq!(a.get(1, 1), a.get(2, 2), max_relative = 1e-14);
        for i in 1..36 {
            for j in 1..36 {
                let zi = ZernikePolynomial::from_noll(i + 1).unwrap();
                let zj = ZernikePolynomial::from_noll(j + 1).unwrap();
                let allowed = zi.m == zj.m && (zi.m == 0 || zi.branch == zj.branch);
                if !allowed {
                    assert_eq!(a.get(i, j), 0.0, "({},{})", i + 1, j + 1);
                }
            }
        }
    }

    // Noll's residual-error table Δ_J; differences of consecutive entries give
    // the summed variance of the modes in between. The table carries three
    // significant digits, so single-mode differences are only good to ~4%.
    #[test]
    fn variances_match_tabulated_residuals() {
        let a = noll_covariance(21, 1.0).unwrap();
        let table = [(3, 0.134), (4, 0.111), (6, 0.0648), (10, 0.0401), (11, 0.0377), (21, 0.0208)];
        for w in table.windows(2) {
            let ((j0, d0), (j1, d1)) = (w[0], w[1]);
            let sum: f64 = (j0 + 1..=j1).map(|j| a.get(j - 1, j - 1)).sum();
            assert_relative_eq!(sum, d0 - d1, max_relative = 0.05);
        }
    }

    #[test]
    fn coma_tilt_coupling_sign_and_size() {
        // Noll's value for E[a2 a8] is -0.0141 at D/r0 = 1.
        let v = noll_entry(2, 8).unwrap();
        assert_relative_eq!(v, -0.0141, max_relative = 0.02);
    }

    #[test]
    fn scaling_and_factor() {
        let a1 = noll_covariance(36, 1.0).unwrap();
        let a2 = noll_covariance(36, 2.0).unwrap();
        let f = 2f64.powf(5.0 / 3.0);
        for k in 0..36 * 36 {
            assert_relative_eq!(a2.entries[k], a1.entries[k] * f, max_relative = 1e-12);
        }
        assert!(a2.factor_residual() < 1e-10);
        for i in 0..36 {
            for j in (i + 1)..36 {
                assert_eq!(a2.l(i, j), 0.0);
            }
        }
        let z = noll_covariance(10, 0.0).unwrap();
        assert!(z.entries.iter().chain(&z.cholesky).all(|&v| v == 0.0));
        assert!(noll_covariance(2, 1.0).is_err());
        assert!(noll_covariance(10, -1.0).is_err());
    }
}
