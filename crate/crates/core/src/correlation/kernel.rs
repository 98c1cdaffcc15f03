//! Spatial correlation kernels `E[a_i(x) a_j(x + sD)]` of Zernike coefficients.
//!
//! Kernels are evaluated as `-½ (c_i ⋆ c_j ⋆ D_φ)(Δ)` where `c_j` are discrete
//! projection weights on a finely sampled aperture. Near lags come from one
//! FFT convolution on the fine grid; far lags, where the structure function
//! is smooth over the aperture footprint, come from a radial table built by
//! direct summation. Autocorrelation kernels only carry the angular harmonics
//! 0 and 2m, so two angles per radius pin the table down.

use super::aperture::{direct_sum, ApertureWeights};
use crate::config::OpticalConfig;
use crate::error::{invalid, Result};
use crate::fft::{fast_len, Fft2};
use crate::noll::{noll_covariance, NollMatrix};
use crate::optics::STRUCTURE_COEFF;
use crate::zernike::ZernikePolynomial;
use num_complex::Complex64;
use std::path::PathBuf;

/// Regular lag grid; index `(r, c)` holds lag `((c - cols/2) p, (r - rows/2) p)` in diameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagGrid {
    pub rows: usize,
    pub cols: usize,
    pub pitch_s: f64,
}

impl LagGrid {
    /// Grid holding every lag between two pixels of an `h × w` field plus the wrap row/column.
    pub fn for_field(h: usize, w: usize, pitch_s: f64) -> Self {
        Self { rows: 2 * h, cols: 2 * w, pitch_s }
    }

    #[inline]
    pub fn lag(&self, r: usize, c: usize) -> (isize, isize) {
        (r as isize - (self.rows / 2) as isize, c as isize - (self.cols / 2) as isize)
    }

    #[inline]
    pub fn index(&self, dy: isize, dx: isize) -> Option<usize> {
        let r = dy + (self.rows / 2) as isize;
        let c = dx + (self.cols / 2) as isize;
        if r < 0 || c < 0 || r >= self.rows as isize || c >= self.cols as isize {
            None
        } else {
            Some(r as usize * self.cols + c as usize)
        }
    }

    pub fn max_radius(&self) -> f64 {
        let (h, w) = ((self.rows / 2) as f64, (self.cols / 2) as f64);
        h.hypot(w) * self.pitch_s
    }
}

#[derive(Debug, Clone)]
pub struct CorrelationKernel {
    pub i: usize,
    pub j: usize,
    pub grid: LagGrid,
    /// Normalized correlation on the grid, row-major.
    pub values: Vec<f64>,
    /// Unnormalized `K_ij(0)` at `D/r0 = 1`.
    pub zero_lag: f64,
    pub warnings: Vec<String>,
}

impl CorrelationKernel {
    #[inline]
    pub fn at(&self, dy: isize, dx: isize) -> Option<f64> {
        self.grid.index(dy, dx).map(|k| self.values[k])
    }

    /// Bilinear interpolation at a continuous lag `(sx, sy)` in diameters.
    pub fn sample(&self, sx: f64, sy: f64) -> Option<f64> {
        let fx = sx / self.grid.pitch_s + (self.grid.cols / 2) as f64;
        let fy = sy / self.grid.pitch_s + (self.grid.rows / 2) as f64;
        let (x0, y0) = (fx.floor(), fy.floor());
        if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 >= self.grid.cols as f64 || y0 + 1.0 >= self.grid.rows as f64 {
            return None;
        }
        let (tx, ty) = (fx - x0, fy - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let c = self.grid.cols;
        let v = |r: usize, cc: usize| self.values[r * c + cc];
        Some(
            (1.0 - ty) * ((1.0 - tx) * v(y0, x0) + tx * v(y0, x0 + 1))
                + ty * ((1.0 - tx) * v(y0 + 1, x0) + tx * v(y0 + 1, x0 + 1)),
        )
    }
}

#[derive(Debug, Clone)]
pub struct KernelOptions {
    /// Minimum aperture samples per diameter.
    pub q_min: f64,
    /// Lags within this radius (diameters) come from the fine-grid FFT.
    pub near_radius: f64,
    pub table_points_per_octave: usize,
    pub check_convergence: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            q_min: 64.0,
            near_radius: 2.5,
            table_points_per_octave: 48,
            check_convergence: true,
            cache_dir: std::env::var_os("TURBSIM_KERNEL_CACHE").map(PathBuf::from),
        }
    }
}

/// Fine-grid step per lag pixel and the implied aperture sampling.
pub fn fine_sampling(pitch_s: f64, q_min: f64) -> (usize, f64) {
    let k = (pitch_s * q_min - 1e-9).ceil().max(1.0) as usize;
    (k, k as f64 / pitch_s)
}

/// FFT convolution machinery for lags up to `r_px` fine samples.
pub struct NearField {
    p: usize,
    r_px: usize,
    fft: Fft2,
    d_hat: Vec<Complex64>,
    spectra: Vec<Option<Vec<Complex64>>>,
}

impl NearField {
    pub fn new(ap: &ApertureWeights, r_px: usize) -> Self {
        let p = fast_len(2 * (r_px + ap.n) + 2);
        let mut fft = Fft2::new(p, p);
        let h = ap.pitch();
        let mut d_hat = vec![Complex64::default(); p * p];
        for r in 0..p {
            let dy = if r < p / 2 { r as f64 } else { r as f64 - p as f64 };
            for c in 0..p {
                let dx = if c < p / 2 { c as f64 } else { c as f64 - p as f64 };
                let r2 = (dx * dx + dy * dy) * h * h;
                d_hat[r * p + c] = Complex64::new(STRUCTURE_COEFF * r2.powf(5.0 / 6.0), 0.0);
            }
        }
        fft.forward(&mut d_hat);
        let spectra = vec![None; ap.weights.len()];
        Self { p, r_px, fft, d_hat, spectra }
    }

    fn spectrum(&mut self, ap: &ApertureWeights, mode: usize) -> Vec<Complex64> {
        if let Some(s) = &self.spectra[mode - 1] {
            return s.clone();
        }
        let (p, n) = (self.p, ap.n);
        let mut buf = vec![Complex64::default(); p * p];
        let w = &ap.weights[mode - 1];
        for r in 0..n {
            for c in 0..n {
                buf[r * p + c] = Complex64::new(w[r * n + c], 0.0);
            }
        }
        self.fft.forward(&mut buf);
        self.spectra[mode - 1] = Some(buf.clone());
        buf
    }

    /// Unnormalized `K_ij` on the wrapped fine grid; read with [`NearValues::get`].
    pub fn compute(&mut self, ap: &ApertureWeights, i: usize, j: usize) -> NearValues {
        let si = self.spectrum(ap, i);
        let sj = if i == j { si.clone() } else { self.spectrum(ap, j) };
        let scale = -0.5 / (self.p * self.p) as f64;
        let mut buf: Vec<Complex64> = si
            .iter()
            .zip(&sj)
            .zip(&self.d_hat)
            .map(|((a, b), d)| a * b.conj() * d * scale)
            .collect();
        self.fft.inverse(&mut buf);
        NearValues { p: self.p, r_px: self.r_px, values: buf.iter().map(|z| z.re).collect() }
    }
}

pub struct NearValues {
    p: usize,
    pub r_px: usize,
    values: Vec<f64>,
}

impl NearValues {
    #[inline]
    pub fn get(&self, dy: isize, dx: isize) -> f64 {
        debug_assert!(dy.unsigned_abs() <= self.r_px && dx.unsigned_abs() <= self.r_px);
        let p = self.p as isize;
        self.values[(dy.rem_euclid(p) * p + dx.rem_euclid(p)) as usize]
    }
}

/// Radial table of an autocorrelation kernel beyond the near-field radius.
struct FarTable {
    m: u32,
    log_r0: f64,
    dlog: f64,
    a0: Vec<f64>,
    b: Vec<f64>,
}

impl FarTable {
    fn build(overlap: &[(f64, f64, f64)], m: u32, r_min: f64, r_max: f64, per_octave: usize) -> Self {
        let dlog = std::f64::consts::LN_2 / per_octave as f64;
        let log_r0 = r_min.ln();
        let count = (((r_max.ln() - log_r0) / dlog).ceil() as usize + 2).max(2);
        let mut a0 = Vec::with_capacity(count);
        let mut b = Vec::with_capacity(count);
        for k in 0..count {
            let r = (log_r0 + k as f64 * dlog).exp();
            let k0 = direct_sum(overlap, r, 0.0);
            if m == 0 {
                a0.push(k0);
                b.push(0.0);
            } else {
                let psi = std::f64::consts::PI / (2.0 * m as f64);
                let k1 = direct_sum(overlap, r * psi.cos(), r * psi.sin());
                a0.push(0.5 * (k0 + k1));
                b.push(0.5 * (k0 - k1));
            }
        }
        Self { m, log_r0, dlog, a0, b }
    }

    fn eval(&self, dx: f64, dy: f64) -> f64 {
        let r = dx.hypot(dy);
        let t = ((r.ln() - self.log_r0) / self.dlog).max(0.0);
        let k = (t.floor() as usize).min(self.a0.len() - 2);
        let f = t - k as f64;
        let a = self.a0[k] * (1.0 - f) + self.a0[k + 1] * f;
        if self.m == 0 {
            return a;
        }
        let b = self.b[k] * (1.0 - f) + self.b[k + 1] * f;
        a + b * (2.0 * self.m as f64 * dy.atan2(dx)).cos()
    }
}

/// Shared state for building every kernel on one lag grid.
pub struct KernelBuilder {
    pub grid: LagGrid,
    pub step: usize,
    pub q: f64,
    pub ap: ApertureWeights,
    near: NearField,
    near_lags: usize,
    opts: KernelOptions,
    fine_check: Option<ApertureWeights>,
}

impl KernelBuilder {
    pub fn new(grid: LagGrid, num_modes: usize, opts: KernelOptions) -> Result<Self> {
        if !(grid.pitch_s > 0.0) || grid.rows < 2 || grid.cols < 2 {
            return invalid("lag grid needs a positive pitch and at least 2×2 lags");
        }
        let (step, q) = fine_sampling(grid.pitch_s, opts.q_min);
        let ap = ApertureWeights::new(q, num_modes);
        let max_lag = (grid.rows / 2).max(grid.cols / 2);
        let near_lags = ((opts.near_radius / grid.pitch_s).ceil() as usize).min(max_lag);
        let near = NearField::new(&ap, near_lags * step);
        let fine_check = opts.check_convergence.then(|| ApertureWeights::new(2.0 * q, num_modes));
        Ok(Self { grid, step, q, ap, near, near_lags, opts, fine_check })
    }

    /// Builds the unit-normalized kernel for modes `(i, j)`.
    pub fn build(&mut self, i: usize, j: usize) -> Result<CorrelationKernel> {
        let n_modes = self.ap.weights.len();
        if i < 2 || j < 2 || i > n_modes || j > n_modes {
            return invalid(format!("modes ({i},{j}) outside 2..={n_modes}"));
        }
        if let Some(k) = self.load_cached(i, j) {
            return Ok(k);
        }
        let grid = self.grid;
        let near = self.near.compute(&self.ap, i, j);
        let needs_far = self.near_lags < grid.rows / 2 || self.near_lags < grid.cols / 2;
        let far = if needs_far {
            if i != j {
                return invalid("cross-correlation kernels are limited to the near-field radius");
            }
            let zi = ZernikePolynomial::from_noll(i)?;
            let overlap = self.ap.overlap(i, i);
            let r_min = 0.9 * self.near_lags as f64 * grid.pitch_s;
            Some(FarTable::build(
                &overlap,
                zi.m,
                r_min,
                grid.max_radius() * 1.01,
                self.opts.table_points_per_octave,
            ))
        } else {
            None
        };
        let zero_i = self.near.compute(&self.ap, i, i).get(0, 0);
        let zero_j = if i == j { zero_i } else { self.near.compute(&self.ap, j, j).get(0, 0) };
        let norm = 1.0 / (zero_i * zero_j).sqrt();
        let zero_lag = near.get(0, 0);
        let step = self.step as isize;
        let nl = self.near_lags as isize;
        let mut values = vec![0.0; grid.rows * grid.cols];
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let (dy, dx) = grid.lag(r, c);
                let v = if dy.abs() <= nl && dx.abs() <= nl {
                    near.get(dy * step, dx * step)
                } else {
                    far.as_ref()
                        .expect("far table present")
                        .eval(dx as f64 * grid.pitch_s, dy as f64 * grid.pitch_s)
                };
                values[r * grid.cols + c] = v * norm;
            }
        }
        let mut warnings = Vec::new();
        if let Some(fine) = &self.fine_check {
            let change = convergence_change(&self.ap, fine, i, j);
            if change > 1e-3 {
                let msg = format!(
                    "kernel ({i},{j}): normalized values change by {change:.2e} when doubling aperture samples"
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        let kernel = CorrelationKernel { i, j, grid, values, zero_lag, warnings };
        self.store_cached(&kernel);
        Ok(kernel)
    }

    fn cache_path(&self, i: usize, j: usize) -> Option<PathBuf> {
        let dir = self.opts.cache_dir.as_ref()?;
        Some(dir.join(format!(
            "k_{i}_{j}_{}x{}_g{}_p{:016x}_r{:08x}.tskr",
            self.grid.rows,
            self.grid.cols,
            self.ap.n,
            self.grid.pitch_s.to_bits(),
            (self.opts.near_radius * 1e4) as u32,
        )))
    }

    fn load_cached(&self, i: usize, j: usize) -> Option<CorrelationKernel> {
        let path = self.cache_path(i, j)?;
        let bytes = std::fs::read(&path).ok()?;
        let mut k = super::cache::decode(&bytes).ok()?;
        if k.i != i || k.j != j || k.grid.rows != self.grid.rows || k.grid.cols != self.grid.cols {
            return None;
        }
        k.grid.pitch_s = self.grid.pitch_s;
        k.zero_lag = direct_sum(&self.ap.overlap(i, j), 0.0, 0.0);
        Some(k)
    }

    fn store_cached(&self, k: &CorrelationKernel) {
        if let Some(path) = self.cache_path(k.i, k.j) {
            let _ = std::fs::create_dir_all(path.parent().unwrap_or(&path));
            let bytes = super::cache::encode(k, self.ap.n as u32);
            if let Err(e) = std::fs::write(&path, bytes) {
                log::warn!("could not write kernel cache {}: {e}", path.display());
            }
        }
    }
}

/// Largest change of the normalized kernel at probe lags between two aperture samplings.
fn convergence_change(coarse: &ApertureWeights, fine: &ApertureWeights, i: usize, j: usize) -> f64 {
    let probes = [0.25, 0.5, 1.0, 2.0];
    let eval = |ap: &ApertureWeights| -> Vec<f64> {
        let c = ap.overlap(i, j);
        let norm = if i == j {
            direct_sum(&c, 0.0, 0.0)
        } else {
            (direct_sum(&ap.overlap(i, i), 0.0, 0.0) * direct_sum(&ap.overlap(j, j), 0.0, 0.0)).sqrt()
        };
        probes.iter().map(|&s| direct_sum(&c, s, 0.0) / norm).collect()
    };
    let a = eval(coarse);
    let b = eval(fine);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_grid(config: &OpticalConfig, grid: &LagGrid) -> Result<()> {
    if ((grid.pitch_s - config.pixel_s()) / config.pixel_s()).abs() > 1e-9 {
        return invalid(format!(
            "lag pitch {} does not match the image pixel pitch {}",
            grid.pitch_s,
            config.pixel_s()
        ));
    }
    if grid.rows / 2 < config.image_height_px || grid.cols / 2 < config.image_width_px {
        return invalid("lag grid does not cover the image extent");
    }
    Ok(())
}

/// Unit-normalized autocorrelation of mode `i` on `grid`.
pub fn build_autocorrelation(i: usize, config: &OpticalConfig, grid: LagGrid) -> Result<CorrelationKernel> {
    config.validate()?;
    check_grid(config, &grid)?;
    let mut b = KernelBuilder::new(grid, config.num_modes.max(i), KernelOptions::default())?;
    b.build(i, i)
}

/// Cross-correlation of modes `i ≠ j`, normalized by `√(K_ii(0) K_jj(0))`.
pub fn build_cross_correlation(
    i: usize,
    j: usize,
    config: &OpticalConfig,
    grid: LagGrid,
) -> Result<CorrelationKernel> {
    if i == j {
        return invalid("cross-correlation needs distinct modes");
    }
    config.validate()?;
    check_grid(config, &grid)?;
    let opts = KernelOptions { near_radius: grid.max_radius() + 1.0, ..KernelOptions::default() };
    let mut b = KernelBuilder::new(grid, config.num_modes.max(i).max(j), opts)?;
    b.build(i, j)
}

#[derive(Debug, Clone)]
pub struct SpecMeta {
    pub d_over_r0: f64,
    pub method: String,
    pub aperture_samples: f64,
    pub warnings: Vec<String>,
}

/// Per-mode autocorrelation kernels plus the Noll matrix that mixes them.
#[derive(Debug, Clone)]
pub struct CorrelationSpec {
    pub grid: LagGrid,
    pub num_modes: usize,
    /// `kernels[k]` belongs to mode `k + 2`.
    pub kernels: Vec<CorrelationKernel>,
    pub noll: NollMatrix,
    pub meta: SpecMeta,
}

impl CorrelationSpec {
    /// Kernels for an `h × w` field at the config's pixel pitch.
    pub fn build(config: &OpticalConfig, h: usize, w: usize, opts: KernelOptions) -> Result<Self> {
        config.validate()?;
        Self::build_raw(config.num_modes, config.d_over_r0, h, w, config.pixel_s(), opts)
    }

    pub fn build_raw(
        num_modes: usize,
        d_over_r0: f64,
        h: usize,
        w: usize,
        pitch_s: f64,
        opts: KernelOptions,
    ) -> Result<Self> {
        if h == 0 || w == 0 {
            return invalid("field dimensions must be non-zero");
        }
        let grid = LagGrid::for_field(h, w, pitch_s);
        let noll = noll_covariance(num_modes, d_over_r0)?;
        let mut builder = KernelBuilder::new(grid, num_modes, opts)?;
        let kernels = (2..=num_modes).map(|m| builder.build(m, m)).collect::<Result<Vec<_>>>()?;
        let warnings = kernels.iter().flat_map(|k| k.warnings.iter().cloned()).collect();
        Ok(Self {
            grid,
            num_modes,
            kernels,
            noll,
            meta: SpecMeta {
                d_over_r0,
                method: "fft-near+radial-far".into(),
                aperture_samples: builder.q,
                warnings,
            },
        })
    }

    pub fn kernel(&self, mode: usize) -> &CorrelationKernel {
        &self.kernels[mode - 2]
    }

    /// Same kernels under a different turbulence strength.
    pub fn with_strength(&self, d_over_r0: f64) -> Result<Self> {
        let mut out = self.clone();
        out.noll = noll_covariance(self.num_modes, d_over_r0)?;
        out.meta.d_over_r0 = d_over_r0;
        Ok(out)
    }
}
