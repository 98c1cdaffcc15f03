//! Low-rank PSF basis and the coefficient map from Zernike vectors to basis weights.
//!
//! Training PSFs are tilt-free: tilt only moves the PSF, and rendering applies
//! it as a per-pixel displacement instead. The first kernel is the normalized
//! mean PSF; the rest are principal directions of the training PSFs after the
//! mean direction is projected out, so every kernel is orthonormal to the
//! others. The map `a ↦ β` is ridge regression on the features
//! `[1, a_4 … a_N, a_i a_j (4 ≤ i ≤ j ≤ N)]`, standardized column-wise.
//!
//! `TSPB` files are little-endian: a 32-byte header
//! `{"TSPB", version u32, M u32, K u32, feature_dim u32, num_modes u32, n_samples u32, 0u32}`,
//! then f64 fields `{ridge λ, residual_energy, residual_total, d_over_r0, pad}`,
//! then f64 arrays: mean PSF (K²), kernels (M·K²), feature means (F),
//! feature scales (F) and regression weights (F·M, row-major by feature).

use super::PsfSynth;
use crate::config::OpticalConfig;
use crate::error::{invalid, Error, Result};
use crate::noll::noll_covariance;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

pub const TSPB_MAGIC: &[u8; 4] = b"TSPB";
pub const TSPB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PsfBasis {
    pub k: usize,
    pub num_modes: usize,
    pub mean: Vec<f64>,
    /// Orthonormal under the pixel inner product; `kernels[0]` is `mean / ‖mean‖`.
    pub kernels: Vec<Vec<f64>>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// `feature_dim × M`, row-major.
    pub weights: Vec<f64>,
    pub ridge_lambda: f64,
    pub n_samples: usize,
    /// Share of the training variance `Σ‖h - mean‖²` outside the basis span.
    pub residual_energy: f64,
    /// Share of the total training energy `Σ‖h‖²` outside the basis span.
    pub residual_total: f64,
    pub d_over_r0: f64,
    pub pad: f64,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub n_samples: usize,
    pub m: usize,
    pub seed: u64,
    /// Fixed ridge strength; `None` picks one on a validation split.
    pub ridge: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { n_samples: 4000, m: 32, seed: 0, ridge: None }
    }
}

/// Number of regression features for `num_modes` Noll modes (tilts and piston excluded).
pub fn feature_dim(num_modes: usize) -> usize {
    let l = num_modes.saturating_sub(3);
    1 + l + l * (l + 1) / 2
}

/// Raw (unstandardized) features of a coefficient vector; `coeffs[0]` is piston.
fn raw_features(coeffs: &[f64], num_modes: usize, out: &mut [f64]) {
    let a = &coeffs[3.min(coeffs.len())..num_modes.min(coeffs.len())];
    let l = num_modes - 3;
    out[0] = 1.0;
    let mut k = 1;
    for i in 0..l {
        out[k] = a.get(i).copied().unwrap_or(0.0);
        k += 1;
    }
    for i in 0..l {
        let ai = a.get(i).copied().unwrap_or(0.0);
        for j in i..l {
            out[k] = ai * a.get(j).copied().unwrap_or(0.0);
            k += 1;
        }
    }
}

/// Mean plus principal directions of `psfs` (each `K²` long).
/// Returns the kernels, the mean, both residual fractions and any rank warning.
pub(crate) fn pca_basis(psfs: &[Vec<f64>], m: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64, f64, Option<String>)> {
    let n = psfs.len();
    if n == 0 || m == 0 {
        return invalid("PCA needs at least one sample and one component");
    }
    let d = psfs[0].len();
    let mut mean = vec![0.0; d];
    for h in psfs {
        mean.iter_mut().zip(h).for_each(|(a, b)| *a += b / n as f64);
    }
    let mnorm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let first: Vec<f64> = mean.iter().map(|v| v / mnorm).collect();
    let resid = DMatrix::from_fn(n, d, |i, j| {
        let c: f64 = psfs[i].iter().zip(&first).map(|(a, b)| a * b).sum();
        psfs[i][j] - c * first[j]
    });
    // Work in the smaller of the two Gram spaces.
    let (vals, vecs) = if n < d {
        let gram = &resid * resid.transpose();
        let eig = SymmetricEigen::new(gram);
        (eig.eigenvalues, Some(eig.eigenvectors))
    } else {
        let cov = resid.transpose() * &resid;
        let eig = SymmetricEigen::new(cov);
        (eig.eigenvalues, Some(eig.eigenvectors))
    };
    let vecs = vecs.unwrap();
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    let total_resid: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-12 * psfs.iter().map(|h| h.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
    let rank = order.iter().filter(|&&i| vals[i] > tol).count();
    let wanted = m - 1;
    let take = wanted.min(rank);
    let warning = (take < wanted).then(|| {
        let msg = format!("PCA rank {} supports only {} components; reducing M from {m}", rank, take + 1);
        log::warn!("{msg}");
        msg
    });
    let mut kernels = vec![first];
    for &i in order.iter().take(take) {
        let v: Vec<f64> = if n < d {
            // Map a Gram eigenvector back to pixel space: resid^T u / sqrt(λ).
            let u = vecs.column(i);
            let s = vals[i].sqrt();
            (0..d).map(|j| (0..n).map(|r| resid[(r, j)] * u[r]).sum::<f64>() / s).collect()
        } else {
            vecs.column(i).iter().copied().collect()
        };
        kernels.push(v);
    }
    // Re-orthonormalize against accumulated rounding.
    for a in 1..kernels.len() {
        for _ in 0..2 {
            for b in 0..a {
                let p: f64 = kernels[a].iter().zip(&kernels[b]).map(|(x, y)| x * y).sum();
                let (head, tail) = kernels.split_at_mut(a);
                tail[0].iter_mut().zip(&head[b]).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nrm = kernels[a].iter().map(|v| v * v).sum::<f64>().sqrt();
        kernels[a].iter_mut().for_each(|v| *v /= nrm);
    }
    let captured: f64 = order.iter().take(take).map(|&i| vals[i].max(0.0)).sum();
    let lost = (total_resid - captured).max(0.0);
    let variance: f64 = psfs
        .iter()
        .map(|h| h.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    let energy: f64 = psfs.iter().map(|h| h.iter().map(|v| v * v).sum::<f64>()).sum();
    let residual_energy = if variance > 1e-12 * energy { (lost / variance).min(1.0) } else { 0.0 };
    Ok((kernels, mean, residual_energy, lost / energy, warning))
}

/// Tilt-free Noll draws, their exact PSFs, the PCA basis and the ridge map.
pub fn p2s_fit(config: &OpticalConfig, opts: &FitOptions) -> Result<(PsfBasis, Vec<String>)> {
    config.validate()?;
    if opts.m == 0 {
        return invalid("M must be at least 1");
    }
    if opts.n_samples < 20 * opts.m {
        return invalid(format!("{} samples are too few for M = {} (need at least {})", opts.n_samples, opts.m, 20 * opts.m));
    }
    let n_modes = config.num_modes;
    let noll = noll_covariance(n_modes, config.d_over_r0)?;
    let mut synth = PsfSynth::new(config)?;
    let k = synth.k;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coeffs = Vec::with_capacity(opts.n_samples);
    let mut psfs = Vec::with_capacity(opts.n_samples);
    let mut z = vec![0.0; n_modes];
    for _ in 0..opts.n_samples {
        z.iter_mut().skip(1).for_each(|v| *v = StandardNormal.sample(&mut rng));
        let mut a: Vec<f64> = (0..n_modes).map(|i| (1..=i).map(|j| noll.l(i, j) * z[j]).sum()).collect();
        a[1] = 0.0;
        a[2] = 0.0;
        let mut h = vec![0.0; k * k];
        synth.psf_from_coeffs(&a, &mut h)?;
        coeffs.push(a);
        psfs.push(h);
    }
    let (kernels, mean, residual_energy, residual_total, warning) = pca_basis(&psfs, opts.m)?;
    let mut warnings: Vec<String> = warning.into_iter().collect();
    let m = kernels.len();

    let fd = feature_dim(n_modes);
    let mut x = DMatrix::zeros(opts.n_samples, fd);
    let mut row = vec![0.0; fd];
    for (i, a) in coeffs.iter().enumerate() {
        raw_features(a, n_modes, &mut row);
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    let mut feature_mean = vec![0.0; fd];
    let mut feature_scale = vec![1.0; fd];
    for j in 1..fd {
        let col = x.column(j);
        let mu = col.mean();
        let sd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / opts.n_samples as f64).sqrt();
        feature_mean[j] = mu;
        feature_scale[j] = if sd > 0.0 { sd } else { 1.0 };
        for i in 0..opts.n_samples {
            x[(i, j)] = (x[(i, j)] - mu) / feature_scale[j];
        }
    }
    let targets = DMatrix::from_fn(opts.n_samples, m, |i, c| {
        psfs[i].iter().zip(&kernels[c]).map(|(a, b)| a * b).sum::<f64>()
    });

    let ridge = match opts.ridge {
        Some(l) => l,
        None => {
            let n_fit = opts.n_samples * 17 / 20;
            let xf = x.rows(0, n_fit).into_owned();
            let tf = targets.rows(0, n_fit).into_owned();
            let xv = x.rows(n_fit, opts.n_samples - n_fit).into_owned();
            let tv = targets.rows(n_fit, opts.n_samples - n_fit).into_owned();
            let mut best = (f64::INFINITY, 1e-6);
            for l in [1e-8, 1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
                if let Ok(w) = ridge_solve(&xf, &tf, l) {
                    let err = (&xv * w - &tv).norm_squared();
                    if err < best.0 {
                        best = (err, l);
                    }
                }
            }
            best.1
        }
    };
    let w = ridge_solve(&x, &targets, ridge)?;
    let mut weights = vec![0.0; fd * m];
    for f in 0..fd {
        for c in 0..m {
            weights[f * m + c] = w[(f, c)];
        }
    }
    if residual_energy > 0.05 {
        let msg = format!("PCA residual energy {residual_energy:.3} exceeds 0.05; consider a larger M");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok((
        PsfBasis {
            k,
            num_modes: n_modes,
            mean,
            kernels,
            feature_mean,
            feature_scale,
            weights,
            ridge_lambda: ridge,
            n_samples: opts.n_samples,
            residual_energy,
            residual_total,
            d_over_r0: config.d_over_r0,
            pad: config.pad_factor(),
        },
        warnings,
    ))
}

/// `(XᵀX/n + λ I') W = XᵀY/n` with the intercept column left unpenalized.
fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let n = x.nrows() as f64;
    let mut a = x.transpose() * x / n;
    for j in 1..a.nrows() {
        a[(j, j)] += lambda;
    }
    // Tiny intercept shift keeps the factorization definite when every feature is constant.
    a[(0, 0)] += 1e-12;
    let b = x.transpose() * y / n;
    let chol = a.cholesky().ok_or_else(|| Error::Numeric("ridge normal equations are not positive definite".into()))?;
    Ok(chol.solve(&b))
}

impl PsfBasis {
    /// Basis spanned by arbitrary `K × K` PSFs, without a regression map (all weights zero).
    pub fn from_psfs(psfs: &[Vec<f64>], m: usize, config: &OpticalConfig) -> Result<(Self, Vec<String>)> {
        config.validate()?;
        let k = config.psf_kernel_px;
        if psfs.iter().any(|h| h.len() != k * k) {
            return invalid(format!("every PSF must have {} samples", k * k));
        }
        let (kernels, mean, residual_energy, residual_total, warning) = pca_basis(psfs, m)?;
        let fd = feature_dim(config.num_modes);
        let feature_scale = vec![1.0; fd];
        Ok((
            Self {
                k,
                num_modes: config.num_modes,
                mean,
                weights: vec![0.0; fd * kernels.len()],
                kernels,
                feature_mean: vec![0.0; fd],
                feature_scale,
                ridge_lambda: 0.0,
                n_samples: psfs.len(),
                residual_energy,
                residual_total,
                d_over_r0: config.d_over_r0,
                pad: config.pad_factor(),
            },
            warning.into_iter().collect(),
        ))
    }

    pub fn m(&self) -> usize {
        self.kernels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_mean.len()
    }

    /// Standardized features of `coeffs` written into `out` (length `feature_dim`).
    pub fn features(&self, coeffs: &[f64], out: &mut [f64]) {
        raw_features(coeffs, self.num_modes, out);
        for j in 1..out.len() {
            out[j] = (out[j] - self.feature_mean[j]) / self.feature_scale[j];
        }
    }

    /// Regression estimate of β from a coefficient vector (tilts ignored).
    pub fn beta(&self, coeffs: &[f64], out: &mut [f64]) {
        let mut f = vec![0.0; self.feature_dim()];
        self.features(coeffs, &mut f);
        let m = self.m();
        out.fill(0.0);
        for (j, fv) in f.iter().enumerate() {
            let w = &self.weights[j * m..(j + 1) * m];
            out.iter_mut().zip(w).for_each(|(o, w)| *o += fv * w);
        }
    }

    /// Exact β: inner products of `psf` with the kernels.
    pub fn project(&self, psf: &[f64], out: &mut [f64]) {
        for (o, k) in out.iter_mut().zip(&self.kernels) {
            *o = k.iter().zip(psf).map(|(a, b)| a * b).sum();
        }
    }

    pub fn reconstruct(&self, beta: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.k * self.k];
        for (b, k) in beta.iter().zip(&self.kernels) {
            h.iter_mut().zip(k).for_each(|(o, v)| *o += b * v);
        }
        h
    }

    /// Pixel sums of each kernel; `Σ β_m sum_m` is the reconstructed PSF's total.
    pub fn kernel_sums(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.iter().sum()).collect()
    }

    /// Largest deviation of the kernel Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.m() {
            for b in 0..=a {
                let d: f64 = self.kernels[a].iter().zip(&self.kernels[b]).map(|(x, y)| x * y).sum();
                worst = worst.max((d - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    /// Checks that the basis was fitted for the geometry and mode count of `config`.
    pub fn check_config(&self, config: &OpticalConfig) -> Result<()> {
        if self.k != config.psf_kernel_px {
            return invalid(format!("basis has K = {}, config has {}", self.k, config.psf_kernel_px));
        }
        if (self.pad - config.pad_factor()).abs() > 1e-9 * self.pad {
            return invalid(format!("basis padding {} does not match config padding {}", self.pad, config.pad_factor()));
        }
        if self.num_modes != config.num_modes {
            return invalid(format!("basis uses {} modes, config {}", self.num_modes, config.num_modes));
        }
        if (self.d_over_r0 - config.d_over_r0).abs() > 1e-12 {
            log::debug!("basis fitted at D/r0 = {}, rendering at {}", self.d_over_r0, config.d_over_r0);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, k, fd) = (self.m(), self.k, self.feature_dim());
        let mut out = Vec::with_capacity(72 + 8 * (k * k * (m + 1) + fd * (2 + m)));
        out.extend_from_slice(TSPB_MAGIC);
        for v in [TSPB_VERSION, m as u32, k as u32, fd as u32, self.num_modes as u32, self.n_samples as u32, 0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.ridge_lambda, self.residual_energy, self.residual_total, self.d_over_r0, self.pad] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let arrays = std::iter::once(&self.mean)
            .chain(&self.kernels)
            .chain([&self.feature_mean, &self.feature_scale, &self.weights]);
        for a in arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 72 || &bytes[..4] != TSPB_MAGIC {
            return Err(Error::Format("not a TSPB basis".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if u(0) as u32 != TSPB_VERSION {
            return Err(Error::Format(format!("unsupported TSPB version {}", u(0))));
        }
        let (m, k, fd, num_modes, n_samples) = (u(1), u(2), u(3), u(4), u(5));
        if num_modes < 3 || fd != feature_dim(num_modes) {
            return Err(Error::Format(format!("feature dimension {fd} does not fit {num_modes} modes")));
        }
        let f = |i: usize| f64::from_le_bytes(bytes[32 + 8 * i..40 + 8 * i].try_into().unwrap());
        let need = 72 + 8 * (k * k * (m + 1) + fd * (2 + m));
        if bytes.len() != need {
            return Err(Error::Format(format!("TSPB is {} bytes, header implies {need}", bytes.len())));
        }
        let mut vals = bytes[72..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
        let mean = take(k * k);
        let kernels = (0..m).map(|_| take(k * k)).collect();
        let feature_mean = take(fd);
        let feature_scale = take(fd);
        let weights = take(fd * m);
        Ok(Self {
            k,
            num_modes,
            mean,
            kernels,
            feature_mean,
            feature_scale,
            weights,
            ridge_lambda: f(0),
            n_samples,
            residual_energy: f(1),
            residual_total: f(2),
            d_over_r0: f(3),
            pad: f(4),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(d_over_r0: f64) -> OpticalConfig {
        OpticalConfig { d_over_r0, num_modes: 10, psf_kernel_px: 17, phase_grid_px: 32, ..OpticalConfig::default() }
    }

    #[test]
    fn feature_layout() {
        assert_eq!(feature_dim(36), 595);
        let mut f = vec![0.0; feature_dim(5)];
        raw_features(&[0.0, 9.0, 9.0, 2.0, 3.0], 5, &mut f);
        assert_eq!(f, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn turbulence_free_basis_collapses() {
        let opts = FitOptions { n_samples: 60, m: 3, seed: 1, ridge: None };
        let (b, warnings) = p2s_fit(&small_config(0.0), &opts).unwrap();
        assert_eq!(b.m(), 1);
        assert!(!warnings.is_empty());
        assert!(b.residual_energy < 1e-6 && b.residual_total < 1e-6);
        let mut synth = PsfSynth::new(&small_config(0.0)).unwrap();
        let mut airy = vec![0.0; 17 * 17];
        synth.psf_from_coeffs(&[0.0], &mut airy).unwrap();
        let mut beta = vec![0.0; 1];
        b.beta(&vec![0.0; 10], &mut beta);
        for (a, r) in airy.iter().zip(b.reconstruct(&beta)) {
            assert!((a - r).abs() < 1e-9);
        }
    }

    #[test]
    fn fitted_basis_is_orthonormal_and_round_trips() {
        let opts = FitOptions { n_samples: 200, m: 6, seed: 2, ridge: None };
        let (b, _) = p2s_fit(&small_config(2.0), &opts).unwrap();
        assert_eq!(b.m(), 6);
        assert!(b.orthonormality_error() < 1e-6);
        let back = PsfBasis::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
        assert!(back.orthonormality_error() < 1e-6);
        assert!(PsfBasis::from_bytes(&b.to_bytes()[..100]).is_err());
    }

    #[test]
    fn sample_count_precondition() {
        let opts = FitOptions { n_samples: 100, m: 6, seed: 0, ridge: None };
        assert!(p2s_fit(&small_config(1.0), &opts).is_err());
    }
}
