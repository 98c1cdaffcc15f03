//! Zernike polynomials in Noll's indexing and normalization.
//!
//! `Z_j` has unit mean square over the unit disk for `j >= 2`; piston is the
//! constant 1. Even `j` takes the `cos(mθ)` branch and odd `j` the `sin(mθ)`
//! branch. Angles are measured from the +x (column) axis towards +y (row
//! index), so `Z_2` is the x-tilt and `Z_3` the y-tilt of the image grid.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Radial,
    Cos,
    Sin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZernikePolynomial {
    pub j: usize,
    pub n: u32,
    pub m: u32,
    pub branch: Branch,
}

impl ZernikePolynomial {
    pub fn from_noll(j: usize) -> Result<Self> {
        if j == 0 {
            return invalid("Noll indices start at 1");
        }
        if j > 5000 {
            return invalid(format!("Noll index {j} is beyond the supported range"));
        }
        let mut n = 0u32;
        while ((n + 1) * (n + 2) / 2) < j as u32 {
            n += 1;
        }
        let p = j as u32 - n * (n + 1) / 2 - 1;
        let m = if n % 2 == 0 { 2 * ((p + 1) / 2) } else { 2 * (p / 2) + 1 };
        let branch = if m == 0 {
            Branch::Radial
        } else if j % 2 == 0 {
            Branch::Cos
        } else {
            Branch::Sin
        };
        Ok(Self { j, n, m, branch })
    }

    /// Radial part `R_n^m(ρ)` without normalization.
    pub fn radial(&self, rho: f64) -> f64 {
        radial(self.n, self.m, rho)
    }

    pub fn norm(&self) -> f64 {
        let n1 = (self.n + 1) as f64;
        if self.m == 0 {
            n1.sqrt()
        } else {
            (2.0 * n1).sqrt()
        }
    }

    pub fn eval(&self, rho: f64, theta: f64) -> f64 {
        let r = self.norm() * self.radial(rho);
        match self.branch {
            Branch::Radial => r,
            Branch::Cos => r * (self.m as f64 * theta).cos(),
            Branch::Sin => r * (self.m as f64 * theta).sin(),
        }
    }

    pub fn eval_xy(&self, x: f64, y: f64) -> f64 {
        self.eval(x.hypot(y), y.atan2(x))
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).fold(1.0, |acc, v| acc * v as f64)
}

pub fn radial(n: u32, m: u32, rho: f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..=((n - m) / 2) {
        let c = factorial(n - k)
            / (factorial(k) * factorial((n + m) / 2 - k) * factorial((n - m) / 2 - k));
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * c * rho.powi((n - 2 * k) as i32);
    }
    acc
}

/// Samples `poly` at polar points `(ρ, θ)`; every point must lie inside the unit disk.
pub fn zernike_eval(poly: &ZernikePolynomial, grid: &[(f64, f64)]) -> Result<Vec<f64>> {
    if let Some(&(rho, _)) = grid.iter().find(|(rho, _)| !(*rho <= 1.0 + 1e-12 && *rho >= 0.0)) {
        return invalid(format!("grid point at rho={rho} lies outside the unit disk"));
    }
    Ok(grid.iter().map(|&(rho, th)| poly.eval(rho, th)).collect())
}

/// Centre of pixel `i` on a `g`-pixel diameter in unit-radius coordinates.
#[inline]
pub fn pupil_coord(i: usize, g: usize) -> f64 {
    (i as f64 + 0.5 - g as f64 / 2.0) * 2.0 / g as f64
}

/// Zernike samples over the pixels of a `g × g` pupil grid whose centres fall inside the disk.
#[derive(Debug, Clone)]
pub struct PupilBasis {
    pub g: usize,
    pub num_modes: usize,
    /// Flat indices (row-major) of in-disk pixels.
    pub pixels: Vec<usize>,
    /// `samples[p * num_modes + (j - 1)]` = Z_j at in-disk pixel `p`.
    samples: Vec<f64>,
}

impl PupilBasis {
    pub fn new(g: usize, num_modes: usize) -> Result<Self> {
        if g < 2 {
            return invalid("pupil grid needs at least 2 pixels");
        }
        if num_modes == 0 {
            return invalid("at least one Zernike mode is required");
        }
        let polys = (1..=num_modes)
            .map(ZernikePolynomial::from_noll)
            .collect::<Result<Vec<_>>>()?;
        let mut pixels = Vec::new();
        let mut samples = Vec::new();
        for r in 0..g {
            let y = pupil_coord(r, g);
            for c in 0..g {
                let x = pupil_coord(c, g);
                if x * x + y * y <= 1.0 {
                    pixels.push(r * g + c);
                    samples.extend(polys.iter().map(|p| p.eval_xy(x, y)));
                }
            }
        }
        Ok(Self { g, num_modes, pixels, samples })
    }

    #[inline]
    pub fn sample(&self, pixel: usize, mode: usize) -> f64 {
        self.samples[pixel * self.num_modes + mode]
    }

    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.g * self.g];
        for &p in &self.pixels {
            m[p] = 1.0;
        }
        m
    }

    /// Writes `Σ_j a_j Z_j` into `out` (length `g²`), zero outside the disk.
    /// Extra coefficients beyond `num_modes` are an error; fewer are treated as zero.
    pub fn phase_into(&self, coeffs: &[f64], out: &mut [f64]) -> Result<()> {
        if coeffs.len() > self.num_modes {
            return invalid(format!(
                "{} coefficients given for a {}-mode basis",
                coeffs.len(),
                self.num_modes
            ));
        }
        if out.len() != self.g * self.g {
            return invalid("output buffer does not match the pupil grid");
        }
        out.fill(0.0);
        let k = coeffs.len();
        for (p, &idx) in self.pixels.iter().enumerate() {
            let row = &self.samples[p * self.num_modes..p * self.num_modes + k];
            out[idx] = row.iter().zip(coeffs).map(|(z, a)| z * a).sum();
        }
        Ok(())
    }

    pub fn phase(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.g * self.g];
        self.phase_into(coeffs, &mut out)?;
        Ok(out)
    }
}

/// `Σ_j a_j Z_j` on a `g × g` grid spanning the aperture diameter, zero outside the disk.
pub fn phase_from_coeffs(coeffs: &[f64], g: usize) -> Result<Vec<f64>> {
    if g < 32 {
        return invalid(format!("phase grid must be at least 32 pixels, got {g}"));
    }
    PupilBasis::new(g, coeffs.len().max(1))?.phase(coeffs)
}
