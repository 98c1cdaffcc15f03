//! Discrete projection weights for Zernike coefficients on a sampled aperture.

use crate::fft::{fast_len, Fft2};
use crate::zernike::ZernikePolynomial;
use num_complex::Complex64;

/// Weights `c_j` such that `a_j = Σ_p c_j(p) φ(p)` recovers the coefficient of
/// `Z_j` from a phase sampled on a `n × n` grid with `q` samples per diameter.
///
/// The polynomials are Gram-Schmidt orthonormalized in the discrete
/// area-weighted inner product, so every weight for `j >= 2` has an exactly
/// vanishing sum and every weight for `j >= 4` exactly vanishing first moments.
/// That is what lets the structure function stand in for the covariance.
#[derive(Debug, Clone)]
pub struct ApertureWeights {
    pub q: f64,
    pub n: usize,
    pub weights: Vec<Vec<f64>>,
}

/// Coordinate (in diameters) of grid index `k` on an `n`-sample grid with `q` samples per diameter.
#[inline]
fn coord(k: usize, n: usize, q: f64) -> f64 {
    (k as f64 - (n as f64 - 1.0) / 2.0) / q
}

/// Fraction of the pixel centred at `(x, y)` (side `h`) covered by the disk of radius 1/2.
fn coverage(x: f64, y: f64, h: f64) -> f64 {
    let r = x.hypot(y);
    let half_diag = h * std::f64::consts::FRAC_1_SQRT_2;
    if r + half_diag <= 0.5 {
        return 1.0;
    }
    if r - half_diag >= 0.5 {
        return 0.0;
    }
    const SUB: usize = 16;
    let mut inside = 0usize;
    for a in 0..SUB {
        let yy = y + h * ((a as f64 + 0.5) / SUB as f64 - 0.5);
        for b in 0..SUB {
            let xx = x + h * ((b as f64 + 0.5) / SUB as f64 - 0.5);
            if xx * xx + yy * yy <= 0.25 {
                inside += 1;
            }
        }
    }
    inside as f64 / (SUB * SUB) as f64
}

impl ApertureWeights {
    pub fn new(q: f64, num_modes: usize) -> Self {
        let n = q.ceil() as usize + 2;
        let h = 1.0 / q;
        let mut mask = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                mask[r * n + c] = coverage(coord(c, n, q), coord(r, n, q), h);
            }
        }
        let total: f64 = mask.iter().sum();
        let inner = |a: &[f64], b: &[f64]| -> f64 {
            mask.iter().zip(a).zip(b).map(|((m, x), y)| m * x * y).sum::<f64>() / total
        };
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(num_modes);
        for j in 1..=num_modes {
            let z = ZernikePolynomial::from_noll(j).expect("valid Noll index");
            let mut v: Vec<f64> = (0..n * n)
                .map(|k| {
                    let (r, c) = (k / n, k % n);
                    // Evaluate at 2x so the unit disk maps to diameter 1.
                    z.eval_xy(2.0 * coord(c, n, q), 2.0 * coord(r, n, q))
                })
                .collect();
            // Two passes of modified Gram-Schmidt for numerical orthogonality.
            for _ in 0..2 {
                for b in &basis {
                    let p = inner(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
            }
            let norm = inner(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        let weights = basis
            .into_iter()
            .map(|v| v.iter().zip(&mask).map(|(z, m)| z * m / total).collect())
            .collect();
        Self { q, n, weights }
    }

    /// Spatial offset in diameters of fine-grid offset `k`.
    pub fn pitch(&self) -> f64 {
        1.0 / self.q
    }

    /// Cross-correlation `C_ij(u) = Σ_p c_i(p) c_j(p + u)` as a sparse list of
    /// `(ux, uy, value)` with offsets in diameters.
    pub fn overlap(&self, i: usize, j: usize) -> Vec<(f64, f64, f64)> {
        let n = self.n;
        let p = fast_len(2 * n);
        let mut fft = Fft2::new(p, p);
        let embed = |w: &[f64]| {
            let mut buf = vec![Complex64::default(); p * p];
            for r in 0..n {
                for c in 0..n {
                    buf[r * p + c] = Complex64::new(w[r * n + c], 0.0);
                }
            }
            buf
        };
        let mut a = embed(&self.weights[i - 1]);
        let mut b = embed(&self.weights[j - 1]);
        fft.forward(&mut a);
        fft.forward(&mut b);
        // C(u) = Σ c_i(p) c_j(p+u)  ->  FFT: conj(ĉ_i) ĉ_j.
        for (x, y) in a.iter_mut().zip(&b) {
            *x = x.conj() * y;
        }
        fft.inverse(&mut a);
        let scale = 1.0 / (p * p) as f64;
        let h = self.pitch();
        let mut out = Vec::new();
        let span = n as isize - 1;
        for dy in -span..=span {
            for dx in -span..=span {
                let idx = (dy.rem_euclid(p as isize) as usize) * p + dx.rem_euclid(p as isize) as usize;
                let v = a[idx].re * scale;
                if v != 0.0 && v.abs() > 1e-300 {
                    out.push((dx as f64 * h, dy as f64 * h, v));
                }
            }
        }
        out
    }
}

/// `K(Δ) = -½ Σ_u C(u) D(u + Δ)` by direct summation, at `D/r0 = 1`.
pub fn direct_sum(overlap: &[(f64, f64, f64)], dx: f64, dy: f64) -> f64 {
    let mut acc = 0.0;
    for &(ux, uy, v) in overlap {
        let r2 = (ux + dx).powi(2) + (uy + dy).powi(2);
        if r2 > 0.0 {
            acc += v * r2.powf(5.0 / 6.0);
        }
    }
    -0.5 * crate::optics::STRUCTURE_COEFF * acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_project_discrete_modes() {
        let ap = ApertureWeights::new(24.0, 10);
        // Σ c_j = 0 for j >= 2; first moments vanish for j >= 4.
        for j in 2..=10 {
            let w = &ap.weights[j - 1];
            let s: f64 = w.iter().sum();
            assert!(s.abs() < 1e-14, "sum for j={j}: {s}");
            if j >= 4 {
                let mx: f64 = w.iter().enumerate().map(|(k, v)| v * (k % ap.n) as f64).sum();
                let my: f64 = w.iter().enumerate().map(|(k, v)| v * (k / ap.n) as f64).sum();
                assert!(mx.abs() < 1e-12 && my.abs() < 1e-12, "moments j={j}: {mx} {my}");
            }
        }
    }

    #[test]
    fn zero_lag_matches_noll() {
        // K_jj(0) approximates the Noll diagonal at D/r0 = 1.
        let ap = ApertureWeights::new(32.0, 11);
        for j in [2, 4, 7, 11] {
            let c = ap.overlap(j, j);
            let k0 = direct_sum(&c, 0.0, 0.0);
            let noll = crate::noll::noll_entry(j, j).unwrap();
            assert!((k0 / noll - 1.0).abs() < 0.02, "j={j}: {k0} vs {noll}");
        }
    }
}
