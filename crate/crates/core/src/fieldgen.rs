//! Dense per-pixel Zernike coefficient fields.
//!
//! Every mode is first drawn as an independent homogeneous Gaussian field by
//! circulant embedding of its unit autocorrelation kernel on the lag grid,
//! then the modes are mixed pixel by pixel with the Cholesky factor of the
//! Noll matrix. Two modes share one complex inverse FFT: the first spectrum
//! feeds the real part and the second the imaginary part. Noise is drawn
//! directly in the spectral domain with Hermitian symmetry, which is the same
//! distribution as transforming real white noise.
//!
//! Temporal evolution is either AR(1) on the pre-mixing fields or frozen flow
//! through an oversized buffer.

use crate::correlation::{CorrelationKernel, CorrelationSpec};
use crate::error::{invalid, Error, Result};
use crate::fft::Fft2;
use crate::noll::NollMatrix;
use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;
use std::path::Path;

pub mod dense;

pub const TSZF_MAGIC: &[u8; 4] = b"TSZF";
pub const TSZF_VERSION: u32 = 1;
const TSZF_HEADER: usize = 32;

/// Coefficient tensor `a[y][x][mode]` in radians; mode index 0 is piston and stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ZernikeField {
    pub height: usize,
    pub width: usize,
    pub num_modes: usize,
    pub seed: u64,
    pub frame: u64,
    pub data: Vec<f64>,
}

impl ZernikeField {
    pub fn zeros(height: usize, width: usize, num_modes: usize) -> Self {
        Self { height, width, num_modes, seed: 0, frame: 0, data: vec![0.0; height * width * num_modes] }
    }

    #[inline]
    pub fn coeffs(&self, y: usize, x: usize) -> &[f64] {
        let k = (y * self.width + x) * self.num_modes;
        &self.data[k..k + self.num_modes]
    }

    /// Coefficient of Noll mode `mode` (1-based) at pixel `(y, x)`.
    #[inline]
    pub fn get(&self, y: usize, x: usize, mode: usize) -> f64 {
        self.data[(y * self.width + x) * self.num_modes + mode - 1]
    }

    /// Row-major plane of one Noll mode.
    pub fn mode_plane(&self, mode: usize) -> Vec<f64> {
        self.data.iter().skip(mode - 1).step_by(self.num_modes).copied().collect()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return invalid("crop outside the field");
        }
        let n = self.num_modes;
        let mut data = Vec::with_capacity(h * w * n);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * n;
            data.extend_from_slice(&self.data[start..start + w * n]);
        }
        Ok(Self { height: h, width: w, data, ..*self })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `TSZF` dump: 32-byte little-endian header then row-major `f32` coefficients.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TSZF_HEADER + 4 * self.data.len());
        out.extend_from_slice(TSZF_MAGIC);
        out.extend_from_slice(&TSZF_VERSION.to_le_bytes());
        for d in [self.height, self.width, self.num_modes] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.frame as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < TSZF_HEADER || &bytes[..4] != TSZF_MAGIC {
            return Err(Error::Format("not a TSZF dump".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != TSZF_VERSION {
            return Err(Error::Format(format!("unsupported TSZF version {version}")));
        }
        let (h, w, n) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let frame = u32_at(28) as u64;
        let count = h * w * n;
        if bytes.len() != TSZF_HEADER + 4 * count {
            return Err(Error::Format(format!(
                "TSZF payload is {} bytes, header implies {}",
                bytes.len() - TSZF_HEADER,
                4 * count
            )));
        }
        let data = bytes[TSZF_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { height: h, width: w, num_modes: n, seed, frame, data })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Unit-variance pre-mixing fields; `fields[k]` belongs to Noll mode `k + 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndependentFields {
    pub height: usize,
    pub width: usize,
    pub fields: Vec<Vec<f64>>,
}

/// Spectral amplitudes `√(λ/n)` of every mode on the embedding grid, plus FFT workspace.
///
/// Sampling runs in single precision with the spectrum stored column-major, so the
/// column transforms act on contiguous memory and only the rows that reach the
/// output are transposed back.
pub struct FieldSampler {
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
    /// Column-major: index `kc * rows + kr`.
    amplitudes: Vec<Vec<f32>>,
    clamped: Vec<f64>,
    seed: u64,
    col_fft: Arc<dyn Fft<f32>>,
    row_fft: Arc<dyn Fft<f32>>,
    scratch: Vec<Complex32>,
    buf: Vec<Complex32>,
    rows_out: Vec<Complex32>,
    noise: Vec<f32>,
}

/// Eigenvalues of the circulant embedding of `kernel`: negative ones are set to zero and the
/// rest rescaled so the embedded variance stays 1. Returns the clamped share of spectral mass.
fn embedded_spectrum(kernel: &CorrelationKernel, fft: &mut Fft2) -> (Vec<f64>, f64) {
    let (rows, cols) = (kernel.grid.rows, kernel.grid.cols);
    let mut c = vec![Complex64::default(); rows * cols];
    for r in 0..rows {
        let src = (r + rows / 2) % rows;
        for col in 0..cols {
            let sc = (col + cols / 2) % cols;
            c[r * cols + col] = Complex64::new(kernel.values[src * cols + sc], 0.0);
        }
    }
    fft.forward(&mut c);
    let n = rows * cols;
    let mut lambda = vec![0.0; n];
    for kr in 0..rows {
        let pr = (rows - kr) % rows;
        for kc in 0..cols {
            let pc = (cols - kc) % cols;
            lambda[kr * cols + kc] = 0.5 * (c[kr * cols + kc].re + c[pr * cols + pc].re);
        }
    }
    let (mut pos, mut neg) = (0.0, 0.0);
    for l in &mut lambda {
        if *l < 0.0 {
            neg -= *l;
            *l = 0.0;
        } else {
            pos += *l;
        }
    }
    // Variance of the embedded field is Σλ / n.
    let scale = if pos > 0.0 { n as f64 / pos } else { 0.0 };
    lambda.iter_mut().for_each(|l| *l *= scale);
    (lambda, neg / (pos + neg).max(f64::MIN_POSITIVE))
}

/// Generator for one mode pair of one draw, seeded by a hash of its coordinates.
fn stream(seed: u64, domain: u64, index: u64, pair: u64) -> Xoshiro256PlusPlus {
    let mut h = Sha256::new();
    h.update(b"tszfield");
    for v in [seed, domain, index, pair] {
        h.update(v.to_le_bytes());
    }
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    Xoshiro256PlusPlus::from_seed(key)
}

impl FieldSampler {
    pub fn new(spec: &CorrelationSpec, height: usize, width: usize, seed: u64) -> Result<Self> {
        let grid = spec.grid;
        if height == 0 || width == 0 {
            return invalid("field dimensions must be non-zero");
        }
        if height > grid.rows / 2 || width > grid.cols / 2 {
            return invalid(format!(
                "{height}x{width} field exceeds the kernel lag extent {}x{} and would alias correlations",
                grid.rows / 2,
                grid.cols / 2
            ));
        }
        if spec.kernels.len() + 1 != spec.num_modes {
            return invalid("spec must hold one kernel per mode from 2 to N");
        }
        let (rows, cols) = (grid.rows, grid.cols);
        let mut fft = Fft2::new(rows, cols);
        let n = (rows * cols) as f64;
        let mut amplitudes = Vec::with_capacity(spec.kernels.len());
        let mut clamped = Vec::with_capacity(spec.kernels.len());
        for k in &spec.kernels {
            if k.grid != grid {
                return invalid("kernel lag grids differ");
            }
            let (lambda, frac) = embedded_spectrum(k, &mut fft);
            if frac > 0.01 {
                log::warn!("mode {}: {:.2}% of the embedded spectrum was negative and clamped", k.i, 100.0 * frac);
            } else {
                log::debug!("mode {}: clamped spectral fraction {:.2e}", k.i, frac);
            }
            let mut amp = vec![0f32; rows * cols];
            for (k, l) in lambda.iter().enumerate() {
                amp[(k % cols) * rows + k / cols] = (l / n).sqrt() as f32;
            }
            amplitudes.push(amp);
            clamped.push(frac);
        }
        let mut planner = FftPlanner::new();
        let col_fft = planner.plan_fft_inverse(rows);
        let row_fft = planner.plan_fft_inverse(cols);
        let scratch_len = col_fft.get_inplace_scratch_len().max(row_fft.get_inplace_scratch_len());
        Ok(Self {
            height,
            width,
            rows,
            cols,
            amplitudes,
            clamped,
            seed,
            col_fft,
            row_fft,
            scratch: vec![Complex32::default(); scratch_len],
            buf: vec![Complex32::default(); rows * cols],
            rows_out: vec![Complex32::default(); height * cols],
            noise: Vec::new(),
        })
    }

    pub fn num_fields(&self) -> usize {
        self.amplitudes.len()
    }

    /// Negative spectral mass discarded per mode, as a fraction of the total.
    pub fn clamped_fractions(&self) -> &[f64] {
        &self.clamped
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent fields of draw `index`; equal indices give bit-identical fields.
    pub fn sample(&mut self, index: u64) -> IndependentFields {
        self.sample_in(0, index)
    }

    fn sample_in(&mut self, domain: u64, index: u64) -> IndependentFields {
        let nf = self.amplitudes.len();
        let mut fields = Vec::with_capacity(nf);
        for pair in 0..nf.div_ceil(2) {
            let mut rng = stream(self.seed, domain, index, pair as u64);
            let a = 2 * pair;
            let b = (a + 1 < nf).then_some(a + 1);
            self.fill_spectrum(&mut rng, a, b);
            self.transform();
            let (h, w, cols) = (self.height, self.width, self.cols);
            let mut fa = Vec::with_capacity(h * w);
            let mut fb = Vec::with_capacity(if b.is_some() { h * w } else { 0 });
            for y in 0..h {
                for z in &self.rows_out[y * cols..y * cols + w] {
                    fa.push(z.re as f64);
                    if b.is_some() {
                        fb.push(z.im as f64);
                    }
                }
            }
            fields.push(fa);
            if b.is_some() {
                fields.push(fb);
            }
        }
        IndependentFields { height: self.height, width: self.width, fields }
    }

    /// Inverse 2D transform of `buf`; the first `height` output rows land in `rows_out`.
    fn transform(&mut self) {
        let (rows, cols, h) = (self.rows, self.cols, self.height);
        self.col_fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        const B: usize = 32;
        for cb in (0..cols).step_by(B) {
            for yb in (0..h).step_by(B) {
                for c in cb..(cb + B).min(cols) {
                    for y in yb..(yb + B).min(h) {
                        self.rows_out[y * cols + c] = self.buf[c * rows + y];
                    }
                }
            }
        }
        self.row_fft.process_with_scratch(&mut self.rows_out, &mut self.scratch);
    }

    /// Hermitian white noise shaped by the amplitudes of fields `a` (real part) and `b`
    /// (imaginary part), written column-major. Only columns `0..=cols/2` are visited; their
    /// conjugate partners cover the rest. Noise is drawn in one pass before shaping.
    fn fill_spectrum(&mut self, rng: &mut Xoshiro256PlusPlus, a: usize, b: Option<usize>) {
        let (rows, cols) = (self.rows, self.cols);
        let per = if b.is_some() { 4 } else { 2 };
        let half = cols / 2 + 1;
        self.noise.clear();
        self.noise.extend((0..per * rows * half).map(|_| rng.sample::<f32, _>(StandardNormal)));
        let amp_a = &self.amplitudes[a];
        let amp_b = b.map(|b| &self.amplitudes[b]);
        let buf = &mut self.buf;
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let i = Complex32::i();
        for kc in 0..half.min(cols) {
            let pc = (cols - kc) % cols;
            let noise = &self.noise[kc * rows * per..(kc + 1) * rows * per];
            for kr in 0..rows {
                let pr = (rows - kr) % rows;
                let k = kc * rows + kr;
                let p = pc * rows + pr;
                if p < k {
                    continue;
                }
                let z = &noise[kr * per..kr * per + per];
                let (xa, xb) = if p == k {
                    (Complex32::new(z[0], 0.0), Complex32::new(if per == 4 { z[2] } else { 0.0 }, 0.0))
                } else if per == 4 {
                    (Complex32::new(z[0] * s, z[1] * s), Complex32::new(z[2] * s, z[3] * s))
                } else {
                    (Complex32::new(z[0] * s, z[1] * s), Complex32::default())
                };
                let (aa, ab) = (amp_a[k], amp_b.map_or(0.0, |v| v[k]));
                // Z = A_a ξ_a + i A_b ξ_b at k and its conjugate pairing at -k.
                buf[k] = xa * aa + i * xb * ab;
                buf[p] = xa.conj() * aa + i * xb.conj() * ab;
            }
        }
    }
}

/// Draws `N - 1` independent unit-variance fields shaped by the spec's kernels.
pub fn sample_independent_fields(
    spec: &CorrelationSpec,
    height: usize,
    width: usize,
    seed: u64,
    index: u64,
) -> Result<IndependentFields> {
    Ok(FieldSampler::new(spec, height, width, seed)?.sample(index))
}

/// Pointwise mixing `a(x) = L f(x)` with the Noll Cholesky factor.
pub fn mix_fields(fields: &IndependentFields, noll: &NollMatrix) -> Result<ZernikeField> {
    let n = noll.n;
    if fields.fields.len() + 1 != n {
        return invalid(format!("{} fields cannot be mixed by a {n}-mode Noll matrix", fields.fields.len()));
    }
    let px = fields.height * fields.width;
    if fields.fields.iter().any(|f| f.len() != px) {
        return invalid("field planes do not match the stated dimensions");
    }
    let mut out = ZernikeField::zeros(fields.height, fields.width, n);
    // Blocks of pixels keep the per-mode partial sums in cache while mixing whole planes.
    const BLOCK: usize = 1024;
    let mut acc = vec![0.0; BLOCK];
    for start in (0..px).step_by(BLOCK) {
        let len = BLOCK.min(px - start);
        for m in 1..n {
            let acc = &mut acc[..len];
            acc.fill(0.0);
            for k in 1..=m {
                let l = noll.cholesky[m * n + k];
                if l == 0.0 {
                    continue;
                }
                for (a, f) in acc.iter_mut().zip(&fields.fields[k - 1][start..start + len]) {
                    *a += l * f;
                }
            }
            for (p, a) in acc.iter().enumerate() {
                out.data[(start + p) * n + m] = *a;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temporal {
    /// `f ← α f + √(1 - α²) g` on the pre-mixing fields.
    Ar { alpha: f64 },
    /// Constant transverse velocity `(vx, vy)` in diameters per frame; the buffer covers twice
    /// `frames` frames of sweep.
    Frozen { velocity: [f64; 2], frames: u64 },
}

impl Default for Temporal {
    fn default() -> Self {
        Temporal::Ar { alpha: 0.95 }
    }
}

/// AR coefficient for a per-frame decorrelation time `tau` (in frames).
pub fn ar_alpha_from_decorrelation(tau_frames: f64) -> Result<f64> {
    if !(tau_frames > 0.0) {
        return invalid("decorrelation time must be positive");
    }
    Ok((-1.0 / tau_frames).exp())
}

/// Buffer size for frozen flow: the field plus twice the sweep in each axis.
pub fn frozen_buffer_dims(height: usize, width: usize, pitch_s: f64, velocity: [f64; 2], frames: u64) -> (usize, usize) {
    let sweep = |v: f64| (v.abs() * frames as f64 / pitch_s).ceil() as usize;
    (height + 2 * sweep(velocity[1]), width + 2 * sweep(velocity[0]))
}

struct FrozenBuffer {
    field: ZernikeField,
    start_frame: u64,
}

/// Stream of correlated frames. Single writer; emitted fields are independent snapshots.
pub struct SamplerState {
    sampler: FieldSampler,
    noll: NollMatrix,
    pitch_s: f64,
    height: usize,
    width: usize,
    temporal: Temporal,
    frame: u64,
    prev: Option<IndependentFields>,
    buffer: Option<FrozenBuffer>,
    generation: u64,
}

impl SamplerState {
    /// For frozen flow the spec must cover [`frozen_buffer_dims`], not just the output size.
    pub fn new(spec: &CorrelationSpec, height: usize, width: usize, seed: u64, temporal: Temporal) -> Result<Self> {
        let sampler = match temporal {
            Temporal::Ar { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return invalid(format!("AR coefficient {alpha} outside [0, 1]"));
                }
                FieldSampler::new(spec, height, width, seed)?
            }
            Temporal::Frozen { velocity, frames } => {
                if velocity.iter().any(|v| !v.is_finite()) {
                    return invalid("velocity must be finite");
                }
                let (bh, bw) = frozen_buffer_dims(height, width, spec.grid.pitch_s, velocity, frames);
                FieldSampler::new(spec, bh, bw, seed).map_err(|_| {
                    Error::InvalidArgument(format!(
                        "frozen flow needs kernels covering a {bh}x{bw} buffer, spec covers {}x{}",
                        spec.grid.rows / 2,
                        spec.grid.cols / 2
                    ))
                })?
            }
        };
        Ok(Self {
            sampler,
            noll: spec.noll.clone(),
            pitch_s: spec.grid.pitch_s,
            height,
            width,
            temporal,
            frame: 0,
            prev: None,
            buffer: None,
            generation: 0,
        })
    }

    pub fn temporal(&self) -> Temporal {
        self.temporal
    }

    /// Index of the frame the next call will produce.
    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn sampler(&self) -> &FieldSampler {
        &self.sampler
    }

    /// Swaps the mixing matrix, e.g. for a new `D/r0`, keeping the pre-mixing fields.
    pub fn set_noll(&mut self, noll: NollMatrix) -> Result<()> {
        if noll.n != self.noll.n {
            return invalid("mode count cannot change mid-stream");
        }
        self.noll = noll;
        Ok(())
    }

    pub fn next_frame(&mut self) -> Result<ZernikeField> {
        match self.temporal {
            Temporal::Ar { .. } => self.next_frame_ar(),
            Temporal::Frozen { .. } => self.next_frame_frozen(),
        }
    }

    pub fn next_frame_ar(&mut self) -> Result<ZernikeField> {
        let Temporal::Ar { alpha } = self.temporal else {
            return invalid("sampler is in frozen-flow mode");
        };
        let fresh = self.sampler.sample(self.frame);
        let fields = match self.prev.take() {
            None => fresh,
            Some(mut prev) => {
                let beta = (1.0 - alpha * alpha).max(0.0).sqrt();
                for (p, g) in prev.fields.iter_mut().zip(&fresh.fields) {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv = alpha * *pv + beta * gv;
                    }
                }
                prev
            }
        };
        let mut out = mix_fields(&fields, &self.noll)?;
        self.prev = Some(fields);
        out.seed = self.sampler.seed;
        out.frame = self.frame;
        self.frame += 1;
        Ok(out)
    }

    pub fn next_frame_frozen(&mut self) -> Result<ZernikeField> {
        let Temporal::Frozen { velocity, .. } = self.temporal else {
            return invalid("sampler is in AR mode");
        };
        if self.buffer.is_none() {
            self.regenerate()?;
        }
        let buf = self.buffer.as_ref().expect("buffer present");
        let local = (self.frame - buf.start_frame) as f64;
        let origin = |v: f64, size: usize, out: usize| -> Option<usize> {
            let base = if v < 0.0 { (size - out) as isize } else { 0 };
            let o = base + (v * local / self.pitch_s).round() as isize;
            (o >= 0 && o as usize + out <= size).then_some(o as usize)
        };
        let (bh, bw) = (buf.field.height, buf.field.width);
        let (Some(y0), Some(x0)) = (origin(velocity[1], bh, self.height), origin(velocity[0], bw, self.width)) else {
            return Err(Error::BufferExhausted { frame: self.frame });
        };
        let mut out = buf.field.crop(y0, x0, self.height, self.width)?;
        out.frame = self.frame;
        self.frame += 1;
        Ok(out)
    }

    /// Draws a fresh frozen-flow buffer starting at the current frame.
    pub fn regenerate(&mut self) -> Result<()> {
        let fields = self.sampler.sample_in(1, self.generation);
        let mut field = mix_fields(&fields, &self.noll)?;
        field.seed = self.sampler.seed;
        self.generation += 1;
        self.buffer = Some(FrozenBuffer { field, start_frame: self.frame });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{KernelOptions, LagGrid};
    use crate::noll::noll_covariance;

    /// Spec whose kernels are all the unit impulse.
    pub(crate) fn white_spec(n: usize, h: usize, w: usize) -> CorrelationSpec {
        let spec_grid = LagGrid::for_field(h, w, 1.0);
        let mut values = vec![0.0; spec_grid.rows * spec_grid.cols];
        values[spec_grid.index(0, 0).unwrap()] = 1.0;
        let kernels = (2..=n)
            .map(|m| CorrelationKernel {
                i: m,
                j: m,
                grid: spec_grid,
                values: values.clone(),
                zero_lag: 1.0,
                warnings: vec![],
            })
            .collect();
        CorrelationSpec {
            grid: spec_grid,
            num_modes: n,
            kernels,
            noll: noll_covariance(n, 1.0).unwrap(),
            meta: crate::correlation::SpecMeta {
                d_over_r0: 1.0,
                method: "impulse".into(),
                aperture_samples: 0.0,
                warnings: vec![],
            },
        }
    }

    #[test]
    fn white_kernel_gives_identity_covariance() {
        let (h, w, n) = (320, 320, 6);
        let f = sample_independent_fields(&white_spec(n, h, w), h, w, 7, 0).unwrap();
        let px = (h * w) as f64;
        for a in 0..n - 1 {
            for b in 0..=a {
                let c: f64 = f.fields[a].iter().zip(&f.fields[b]).map(|(x, y)| x * y).sum::<f64>() / px;
                if a == b {
                    assert!((c - 1.0).abs() < 0.02, "var {c}");
                } else {
                    assert!(c.abs() < 0.02, "cov({a},{b}) = {c}");
                }
            }
        }
        // Neighbouring pixels are uncorrelated too.
        let c: f64 = (0..h * w - 1).map(|p| f.fields[0][p] * f.fields[0][p + 1]).sum::<f64>() / px;
        assert!(c.abs() < 0.02);
    }

    #[test]
    fn identity_mixing_is_passthrough() {
        let (h, w, n) = (4, 5, 5);
        let fields = IndependentFields {
            height: h,
            width: w,
            fields: (0..n - 1).map(|k| (0..h * w).map(|p| (p * 7 + k) as f64 * 0.1).collect()).collect(),
        };
        let mut noll = noll_covariance(n, 1.0).unwrap();
        noll.cholesky = (0..n * n).map(|k| if k / n == k % n && k != 0 { 1.0 } else { 0.0 }).collect();
        let a = mix_fields(&fields, &noll).unwrap();
        for m in 2..=n {
            assert_eq!(a.mode_plane(m), fields.fields[m - 2]);
        }
        assert!(a.mode_plane(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mixing_rejects_mismatch() {
        let fields = IndependentFields { height: 2, width: 2, fields: vec![vec![0.0; 4]; 3] };
        assert!(mix_fields(&fields, &noll_covariance(6, 1.0).unwrap()).is_err());
    }

    #[test]
    fn oversized_field_is_rejected() {
        let spec = white_spec(4, 8, 8);
        assert!(FieldSampler::new(&spec, 9, 8, 0).is_err());
        assert!(FieldSampler::new(&spec, 8, 8, 0).is_ok());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = CorrelationSpec::build_raw(6, 2.0, 16, 16, 0.1, KernelOptions { cache_dir: None, ..Default::default() })
            .unwrap();
        let run = |seed| {
            let mut st = SamplerState::new(&spec, 16, 16, seed, Temporal::default()).unwrap();
            (st.next_frame().unwrap(), st.next_frame().unwrap())
        };
        let (a0, a1) = run(3);
        let (b0, b1) = run(3);
        assert_eq!(a0, b0);
        assert_eq!(a1, b1);
        assert_ne!(run(4).0.data, a0.data);
    }

    #[test]
    fn dump_round_trip() {
        let mut f = ZernikeField::zeros(3, 2, 4);
        f.seed = 99;
        f.frame = 5;
        for (k, v) in f.data.iter_mut().enumerate() {
            *v = k as f64 * 0.25 - 1.0;
        }
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], b"TSZF");
        assert_eq!(bytes.len(), 32 + 4 * 24);
        assert_eq!(ZernikeField::from_bytes(&bytes).unwrap(), f);
        assert!(ZernikeField::from_bytes(&bytes[..40]).is_err());
    }

    #[test]
    fn ar_limits() {
        let spec = white_spec(4, 8, 8);
        let mut frozen = SamplerState::new(&spec, 8, 8, 1, Temporal::Ar { alpha: 1.0 }).unwrap();
        let a = frozen.next_frame().unwrap();
        let b = frozen.next_frame().unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(b.frame, 1);
        assert!(SamplerState::new(&spec, 8, 8, 1, Temporal::Ar { alpha: 1.5 }).is_err());
        assert!(frozen.next_frame_frozen().is_err());
    }

    #[test]
    fn frozen_flow_crops_and_exhausts() {
        let v = [2.0, -1.0];
        let (bh, bw) = frozen_buffer_dims(6, 6, 1.0, v, 3);
        assert_eq!((bh, bw), (12, 18));
        let spec = white_spec(4, bh, bw);
        let mut st = SamplerState::new(&spec, 6, 6, 2, Temporal::Frozen { velocity: v, frames: 3 }).unwrap();
        let frames: Vec<_> = (0..7).map(|_| st.next_frame().unwrap()).collect();
        // The crop window of frame k sits at (2k, -k) pixels from frame 0.
        assert_eq!(frames[1].get(1, 0, 2), frames[0].get(0, 2, 2));
        assert_eq!(frames[2].coeffs(2, 1), frames[0].coeffs(0, 5));
        assert_eq!(frames[6].coeffs(2, 0), frames[4].coeffs(0, 4));
        match st.next_frame() {
            Err(Error::BufferExhausted { frame }) => assert_eq!(frame, 7),
            other => panic!("expected exhaustion, got {other:?}"),
        }
        st.regenerate().unwrap();
        let fresh = st.next_frame().unwrap();
        assert_eq!(fresh.frame, 7);
        assert_ne!(fresh.data, frames[6].data);
    }

    #[test]
    fn frozen_zero_velocity_repeats() {
        let spec = white_spec(3, 4, 4);
        let mut st = SamplerState::new(&spec, 4, 4, 0, Temporal::Frozen { velocity: [0.0, 0.0], frames: 10 }).unwrap();
        let a = st.next_frame().unwrap();
        for _ in 0..5 {
            assert_eq!(st.next_frame().unwrap().data, a.data);
        }
    }

    #[test]
    fn alpha_from_decorrelation() {
        assert!((ar_alpha_from_decorrelation(1.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!(ar_alpha_from_decorrelation(0.0).is_err());
    }
}
