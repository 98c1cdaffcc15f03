//! Energy of the correlation tensor captured by the mixing approximation.
//!
//! `E(s)` integrates `tr(A_sᵀ A_s)` over the disk of radius `s`, `Ẽ(s)` does
//! the same for `Ã_s = L diag(ρ_kk(s)) Lᵀ`, and `E⁻(s)` integrates the
//! absolute difference of the two traces. Everything is at `D/r0 = 1`.

use super::aperture::{direct_sum, ApertureWeights};
use super::kernel::{NearField, NearValues};
use crate::error::{invalid, Error, Result};
use std::f64::consts::PI;

/// Tensor slices `A_ab(s)` sampled on a polar grid.
#[derive(Debug, Clone)]
pub struct PolarSlices {
    /// Modes entering the traces.
    pub modes: Vec<usize>,
    pub radii: Vec<f64>,
    pub angles: usize,
    /// `values[a * modes.len() + b][ir * angles + ia]`.
    pub values: Vec<Vec<f64>>,
}

impl PolarSlices {
    fn same_grid(&self, other: &Self) -> bool {
        self.modes == other.modes && self.radii == other.radii && self.angles == other.angles
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, ir: usize, ia: usize) -> f64 {
        self.values[a * self.modes.len() + b][ir * self.angles + ia]
    }
}

#[derive(Debug, Clone)]
pub struct EnergyCurves {
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub e_tilde: Vec<f64>,
    pub e_minus: Vec<f64>,
}

/// Settings for sampling the tensor on a polar grid.
#[derive(Debug, Clone)]
pub struct EnergySetup {
    pub num_modes: usize,
    /// First mode entering the traces (4 skips piston and tilts).
    pub first_mode: usize,
    pub s_max: f64,
    pub radial_step: f64,
    pub angles: usize,
    /// Aperture samples per diameter.
    pub q: f64,
}

impl Default for EnergySetup {
    fn default() -> Self {
        Self { num_modes: 36, first_mode: 4, s_max: 10.0, radial_step: 0.05, angles: 64, q: 32.0 }
    }
}

fn bilinear(near: &NearValues, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    (1.0 - ty) * ((1.0 - tx) * near.get(y0, x0) + tx * near.get(y0, x0 + 1))
        + ty * ((1.0 - tx) * near.get(y0 + 1, x0) + tx * near.get(y0 + 1, x0 + 1))
}

struct PolarSampler {
    ap: ApertureWeights,
    near: NearField,
    radii: Vec<f64>,
    angles: usize,
}

impl PolarSampler {
    fn new(setup: &EnergySetup) -> Result<Self> {
        if setup.angles < 4 || setup.angles % 2 != 0 {
            return invalid("angular samples must be an even number >= 4");
        }
        if !(setup.s_max > 0.0 && setup.radial_step > 0.0) {
            return invalid("s_max and radial_step must be positive");
        }
        if setup.first_mode < 2 || setup.first_mode > setup.num_modes {
            return invalid("first_mode must lie in 2..=num_modes");
        }
        let ap = ApertureWeights::new(setup.q, setup.num_modes);
        let r_px = ((setup.s_max + 2.0 * setup.radial_step) * setup.q).ceil() as usize + 2;
        let near = NearField::new(&ap, r_px);
        let count = (setup.s_max / setup.radial_step).round() as usize + 1;
        let radii = (0..count).map(|k| k as f64 * setup.radial_step).collect();
        Ok(Self { ap, near, radii, angles: setup.angles })
    }

    /// `K_ij` on the polar grid, unnormalized.
    fn sample(&mut self, i: usize, j: usize) -> Vec<f64> {
        let near = self.near.compute(&self.ap, i, j);
        let q = self.ap.q;
        let mut out = Vec::with_capacity(self.radii.len() * self.angles);
        for &r in &self.radii {
            for ia in 0..self.angles {
                let psi = 2.0 * PI * ia as f64 / self.angles as f64;
                out.push(bilinear(&near, r * psi.cos() * q, r * psi.sin() * q));
            }
        }
        out
    }

    /// Rotates by π: the sample at `-s`.
    fn flip(&self, v: &[f64]) -> Vec<f64> {
        let na = self.angles;
        let mut out = vec![0.0; v.len()];
        for ir in 0..self.radii.len() {
            for ia in 0..na {
                out[ir * na + ia] = v[ir * na + (ia + na / 2) % na];
            }
        }
        out
    }
}

/// Builds the exact slices `A_ab(s)` and the mixing approximation `Ã_ab(s)` for
/// the trace modes. The mixing factor comes from the zero-lag matrix of the
/// same quadrature so that `Ã_0 = A_0` holds to rounding.
pub fn tensor_slices(setup: &EnergySetup) -> Result<(PolarSlices, PolarSlices)> {
    let mut ps = PolarSampler::new(setup)?;
    let nm = setup.num_modes;
    let modes: Vec<usize> = (setup.first_mode..=nm).collect();
    let t = modes.len();
    let mut full = vec![Vec::new(); t * t];
    for a in 0..t {
        for b in a..t {
            let v = ps.sample(modes[a], modes[b]);
            if a != b {
                full[b * t + a] = ps.flip(&v);
            }
            full[a * t + b] = v;
        }
    }
    // Zero-lag covariance over modes 2..=N from the same discretization.
    let m = nm - 1;
    let mut a0 = nalgebra::DMatrix::<f64>::zeros(m, m);
    for i in 2..=nm {
        for j in i..=nm {
            let v = direct_sum(&ps.ap.overlap(i, j), 0.0, 0.0);
            a0[(i - 2, j - 2)] = v;
            a0[(j - 2, i - 2)] = v;
        }
    }
    let l = a0
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("quadrature zero-lag matrix is not positive definite".into()))?
        .l();
    let rho: Vec<Vec<f64>> = (2..=nm)
        .map(|k| {
            let v = ps.sample(k, k);
            let z = a0[(k - 2, k - 2)];
            v.into_iter().map(|x| x / z).collect()
        })
        .collect();
    let npts = ps.radii.len() * ps.angles;
    let mut approx = vec![vec![0.0; npts]; t * t];
    for a in 0..t {
        for b in 0..t {
            let (ia, ib) = (modes[a] - 2, modes[b] - 2);
            let out = &mut approx[a * t + b];
            for k in 0..=ia.min(ib) {
                let w = l[(ia, k)] * l[(ib, k)];
                if w != 0.0 {
                    out.iter_mut().zip(&rho[k]).for_each(|(o, r)| *o += w * r);
                }
            }
        }
    }
    let mk = |values| PolarSlices { modes: modes.clone(), radii: ps.radii.clone(), angles: ps.angles, values };
    Ok((mk(full), mk(approx)))
}

/// Cumulative `E`, `Ẽ`, `E⁻` on the radial grid of the slices.
pub fn energy_metrics(full: &PolarSlices, approx: &PolarSlices) -> Result<EnergyCurves> {
    if !full.same_grid(approx) {
        return invalid("exact and approximate slices are sampled on different grids");
    }
    let (nr, na, t) = (full.radii.len(), full.angles, full.modes.len());
    let dpsi = 2.0 * PI / na as f64;
    let mut ring_e = vec![0.0; nr];
    let mut ring_t = vec![0.0; nr];
    let mut ring_m = vec![0.0; nr];
    for ir in 0..nr {
        for ia in 0..na {
            let (mut te, mut tt) = (0.0, 0.0);
            for p in 0..t * t {
                let a = full.values[p][ir * na + ia];
                let b = approx.values[p][ir * na + ia];
                te += a * a;
                tt += b * b;
            }
            ring_e[ir] += te * dpsi;
            ring_t[ir] += tt * dpsi;
            ring_m[ir] += (te - tt).abs() * dpsi;
        }
    }
    let cumulate = |ring: &[f64]| {
        let mut out = vec![0.0; nr];
        for k in 1..nr {
            let (r0, r1) = (full.radii[k - 1], full.radii[k]);
            out[k] = out[k - 1] + 0.5 * (r1 - r0) * (r0 * ring[k - 1] + r1 * ring[k]);
        }
        out
    };
    Ok(EnergyCurves {
        s: full.radii.clone(),
        e: cumulate(&ring_e),
        e_tilde: cumulate(&ring_t),
        e_minus: cumulate(&ring_m),
    })
}
