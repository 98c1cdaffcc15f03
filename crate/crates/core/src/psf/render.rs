//! Spatially varying blur: the exact per-pixel PSF gather and the basis (P2S) renderer.
//!
//! Both use the gather convention `out(x) = Σ_u h_x(u) I(x - u)` with
//! symmetric reflection at the borders. P2S replaces `h_x` by
//! `Σ_m β_m(x) φ_m(u - d(x))`, so the output is
//! `Σ_m β_m(x) (φ_m ⊛ I)(x - d(x))`, read off M full-image convolutions
//! with bicubic interpolation.

use super::{PsfBasis, PsfSynth};
use crate::config::OpticalConfig;
use crate::error::{invalid, Result};
use crate::fft::{fast_len, Fft2};
use crate::fieldgen::ZernikeField;
use crate::raster::Raster;
use num_complex::Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Exact,
    P2s,
}

/// How per-pixel basis weights are obtained from a coefficient field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaSource {
    /// Learned map from the tilt-free coefficients; tilt becomes a displacement.
    Regression,
    /// Inner products with the exact PSF. With `tilt_as_shift` the PSF is tilt-free
    /// and tilt becomes a displacement, otherwise the tilted PSF is projected directly.
    Projection { tilt_as_shift: bool },
}

/// Weight planes for [`render_p2s`]: `beta[(y * W + x) * m + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct P2sInput {
    pub width: usize,
    pub height: usize,
    pub m: usize,
    pub beta: Vec<f64>,
    /// Per-pixel `[dx, dy]` in pixels, if tilt is applied as a shift.
    pub displacement: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: Raster,
    pub mode: RenderMode,
    pub seed: u64,
    pub frame: u64,
    pub config_hash: String,
    pub weights: Option<P2sInput>,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Tilt displacement `[dx, dy]` in pixels: `a2` moves along x, `a3` along y.
pub fn displacement_map(field: &ZernikeField, config: &OpticalConfig) -> Result<Vec<[f64; 2]>> {
    config.validate()?;
    if field.num_modes < 3 {
        return invalid("field has no tilt modes");
    }
    let per_rad = -2.0 * config.pad_factor() / std::f64::consts::PI;
    Ok(field.data.chunks_exact(field.num_modes).map(|c| [per_rad * c[1], per_rad * c[2]]).collect())
}

/// Rescales `beta` so the reconstructed PSF has unit sum; left alone when that sum is degenerate.
fn unit_sum(beta: &mut [f64], sums: &[f64]) {
    let s: f64 = beta.iter().zip(sums).map(|(b, s)| b * s).sum();
    if s > 1e-3 {
        beta.iter_mut().for_each(|b| *b /= s);
    }
}

pub fn beta_planes(
    field: &ZernikeField,
    basis: &PsfBasis,
    config: &OpticalConfig,
    source: BetaSource,
) -> Result<P2sInput> {
    basis.check_config(config)?;
    if field.num_modes < 3 {
        return invalid("field has no tilt modes");
    }
    let m = basis.m();
    let n = field.height * field.width;
    let sums = basis.kernel_sums();
    let mut beta = vec![0.0; n * m];
    let shift = !matches!(source, BetaSource::Projection { tilt_as_shift: false });
    match source {
        BetaSource::Regression => {
            let mut feats = vec![0.0; basis.feature_dim()];
            for (p, out) in beta.chunks_exact_mut(m).enumerate() {
                let c = &field.data[p * field.num_modes..(p + 1) * field.num_modes];
                basis.features(c, &mut feats);
                for (j, f) in feats.iter().enumerate() {
                    let w = &basis.weights[j * m..(j + 1) * m];
                    out.iter_mut().zip(w).for_each(|(o, w)| *o += f * w);
                }
                unit_sum(out, &sums);
            }
        }
        BetaSource::Projection { tilt_as_shift } => {
            let mut synth = PsfSynth::with_params(config.phase_grid_px, basis.k, basis.pad, field.num_modes)?;
            let mut psf = vec![0.0; basis.k * basis.k];
            let mut c = vec![0.0; field.num_modes];
            for (p, out) in beta.chunks_exact_mut(m).enumerate() {
                c.copy_from_slice(&field.data[p * field.num_modes..(p + 1) * field.num_modes]);
                if tilt_as_shift {
                    c[1] = 0.0;
                    c[2] = 0.0;
                }
                synth.psf_from_coeffs(&c, &mut psf)?;
                basis.project(&psf, out);
                unit_sum(out, &sums);
            }
        }
    }
    let displacement = if shift { Some(displacement_map(field, config)?) } else { None };
    Ok(P2sInput { width: field.width, height: field.height, m, beta, displacement })
}

/// Keys cubic convolution weights (a = -1/2) for taps at offsets -1, 0, 1, 2.
#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

pub fn render_p2s(image: &Raster, input: &P2sInput, basis: &PsfBasis) -> Result<Raster> {
    let (w, h) = (image.width, image.height);
    if input.width != w || input.height != h {
        return invalid(format!("weights are {}x{}, image is {w}x{h}", input.width, input.height));
    }
    let m = basis.m();
    if input.m != m || input.beta.len() != w * h * m {
        return invalid(format!("weights carry {} kernels, basis has {m}", input.m));
    }
    if let Some(d) = &input.displacement {
        if d.len() != w * h || d.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return invalid("displacement map has the wrong size or non-finite entries");
        }
    }
    let k = basis.k;
    let max_d = input
        .displacement
        .as_ref()
        .map(|d| d.iter().fold(0.0f64, |a, v| a.max(v[0].abs()).max(v[1].abs())))
        .unwrap_or(0.0);
    let pad = k / 2 + max_d.ceil() as usize + 2;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let (rows, cols) = (fast_len(hp), fast_len(wp));
    let mut fft = Fft2::new(rows, cols);
    let scale = 1.0 / (rows * cols) as f64;

    // Kernel pairs packed as φ_a + i φ_b, centred at the origin with wrap-around.
    let pairs: Vec<Vec<Complex64>> = (0..m)
        .step_by(2)
        .map(|a| {
            let mut buf = vec![Complex64::default(); rows * cols];
            for r in 0..k {
                for c in 0..k {
                    let y = (r as isize - (k / 2) as isize).rem_euclid(rows as isize) as usize;
                    let x = (c as isize - (k / 2) as isize).rem_euclid(cols as isize) as usize;
                    let im = if a + 1 < m { basis.kernels[a + 1][r * k + c] } else { 0.0 };
                    buf[y * cols + x] = Complex64::new(basis.kernels[a][r * k + c], im);
                }
            }
            fft.forward(&mut buf);
            buf
        })
        .collect();

    // Per-pixel sampling positions in padded coordinates and their cubic weights.
    let mut taps: Vec<(usize, usize, [f64; 4], [f64; 4])> = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let [dx, dy] = input.displacement.as_ref().map(|d| d[y * w + x]).unwrap_or([0.0, 0.0]);
            let (py, px) = ((y + pad) as f64 - dy, (x + pad) as f64 - dx);
            let (fy, fx) = (py.floor(), px.floor());
            taps.push(((fy as usize) - 1, (fx as usize) - 1, cubic_weights(py - fy), cubic_weights(px - fx)));
        }
    }

    let mut planes = Vec::with_capacity(image.channels());
    let mut spec = vec![Complex64::default(); rows * cols];
    let mut buf = vec![Complex64::default(); rows * cols];
    for plane in &image.planes {
        spec.fill(Complex64::default());
        for r in 0..hp {
            let sy = reflect(r as isize - pad as isize, h);
            for c in 0..wp {
                let sx = reflect(c as isize - pad as isize, w);
                spec[r * cols + c] = Complex64::new(plane[sy * w + sx], 0.0);
            }
        }
        fft.forward(&mut spec);
        let mut out = vec![0.0; w * h];
        for (pi, kern) in pairs.iter().enumerate() {
            let a = 2 * pi;
            for ((b, s), kk) in buf.iter_mut().zip(&spec).zip(kern) {
                *b = s * kk * scale;
            }
            fft.inverse(&mut buf);
            let has_b = a + 1 < m;
            for (p, (ty, tx, wy, wx)) in taps.iter().enumerate() {
                let mut v = Complex64::default();
                for (i, wyi) in wy.iter().enumerate() {
                    let row = &buf[(ty + i) * cols + tx..(ty + i) * cols + tx + 4];
                    let mut acc = Complex64::default();
                    for (z, wxj) in row.iter().zip(wx) {
                        acc += z * wxj;
                    }
                    v += acc * wyi;
                }
                let beta = &input.beta[p * m..p * m + m];
                out[p] += beta[a] * v.re + if has_b { beta[a + 1] * v.im } else { 0.0 };
            }
        }
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        planes.push(out);
    }
    Ok(Raster { width: w, height: h, planes })
}

/// Reference renderer: the full tilted PSF of every pixel applied by direct summation.
pub fn render_exact(image: &Raster, field: &ZernikeField, config: &OpticalConfig) -> Result<Raster> {
    config.validate()?;
    let (w, h) = (image.width, image.height);
    if field.width != w || field.height != h {
        return invalid(format!("field is {}x{}, image is {w}x{h}", field.width, field.height));
    }
    let k = config.psf_kernel_px;
    let mut synth = PsfSynth::with_params(config.phase_grid_px, k, config.pad_factor(), field.num_modes.max(1))?;
    let mut psf = vec![0.0; k * k];
    let half = (k / 2) as isize;
    let mut planes = vec![vec![0.0; w * h]; image.channels()];
    let mut idx = vec![0usize; k * k];
    for y in 0..h {
        for x in 0..w {
            synth.psf_from_coeffs(field.coeffs(y, x), &mut psf)?;
            for r in 0..k {
                let sy = reflect(y as isize - (r as isize - half), h);
                for c in 0..k {
                    idx[r * k + c] = sy * w + reflect(x as isize - (c as isize - half), w);
                }
            }
            for (out, src) in planes.iter_mut().zip(&image.planes) {
                out[y * w + x] = psf.iter().zip(&idx).map(|(p, &i)| p * src[i]).sum();
            }
        }
    }
    Ok(Raster { width: w, height: h, planes })
}

/// One rendered frame with its provenance.
pub fn render_frame(
    image: &Raster,
    field: &ZernikeField,
    config: &OpticalConfig,
    mode: RenderMode,
    basis: Option<&PsfBasis>,
    source: BetaSource,
) -> Result<RenderedFrame> {
    let (out, weights) = match mode {
        RenderMode::Exact => (render_exact(image, field, config)?, None),
        RenderMode::P2s => {
            let Some(basis) = basis else {
                return invalid("P2S rendering needs a fitted basis");
            };
            let input = beta_planes(field, basis, config, source)?;
            (render_p2s(image, &input, basis)?, Some(input))
        }
    };
    Ok(RenderedFrame {
        image: out,
        mode,
        seed: field.seed,
        frame: field.frame,
        config_hash: config.hash(),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psf::basis::pca_basis;

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn cubic_weights_partition_unity() {
        for t in [0.0, 0.3, 0.77] {
            let s: f64 = cubic_weights(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    fn delta_basis(k: usize) -> PsfBasis {
        let psfs: Vec<Vec<f64>> = (0..k * k)
            .map(|i| {
                let mut v = vec![0.0; k * k];
                v[i] = 1.0;
                v[k * k / 2] += 1.0;
                v
            })
            .collect();
        let (kernels, mean, _, _, _) = pca_basis(&psfs, k * k).unwrap();
        PsfBasis {
            k,
            num_modes: 3,
            mean,
            kernels,
            feature_mean: vec![0.0; 1],
            feature_scale: vec![1.0; 1],
            weights: vec![0.0; k * k],
            ridge_lambda: 0.0,
            n_samples: k * k,
            residual_energy: 0.0,
            residual_total: 0.0,
            d_over_r0: 0.0,
            pad: 1.0,
        }
    }

    #[test]
    fn sifting_reproduces_the_local_psf() {
        let k = 5;
        let basis = delta_basis(k);
        assert_eq!(basis.m(), k * k);
        let (w, h) = (15, 15);
        let mut img = vec![0.0; w * h];
        img[7 * w + 7] = 1.0;
        let image = Raster::gray(w, h, img).unwrap();
        let mut target = vec![0.0; k * k];
        for (i, v) in target.iter_mut().enumerate() {
            *v = ((i * 7) % 11) as f64 / 11.0 * 0.2;
        }
        let mut b = vec![0.0; k * k];
        basis.project(&target, &mut b);
        let beta: Vec<f64> = (0..w * h).flat_map(|_| b.clone()).collect();
        let out = render_p2s(&image, &P2sInput { width: w, height: h, m: k * k, beta, displacement: None }, &basis).unwrap();
        for r in 0..k {
            for c in 0..k {
                let got = out.planes[0][(7 + r - k / 2) * w + 7 + c - k / 2];
                assert!((got - target[r * k + c]).abs() < 1e-12, "({r},{c}): {got}");
            }
        }
    }

    #[test]
    fn integer_displacement_is_a_pure_shift() {
        let k = 3;
        let basis = delta_basis(k);
        let (w, h) = (20, 16);
        let image = crate::raster::natural_scene(w, h, 4);
        let mut b = vec![0.0; k * k];
        let mut centre = vec![0.0; k * k];
        centre[k * k / 2] = 1.0;
        basis.project(&centre, &mut b);
        let beta: Vec<f64> = (0..w * h).flat_map(|_| b.clone()).collect();
        let disp = vec![[2.0, -1.0]; w * h];
        let input = P2sInput { width: w, height: h, m: k * k, beta, displacement: Some(disp) };
        let out = render_p2s(&image, &input, &basis).unwrap();
        for y in 0..h {
            for x in 0..w {
                let src = image.planes[0][reflect(y as isize + 1, h) * w + reflect(x as isize - 2, w)];
                assert!((out.planes[0][y * w + x] - src).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let basis = delta_basis(3);
        let image = Raster::gray(4, 4, vec![0.5; 16]).unwrap();
        let bad = P2sInput { width: 4, height: 4, m: 2, beta: vec![0.0; 32], displacement: None };
        assert!(render_p2s(&image, &bad, &basis).is_err());
        let bad = P2sInput { width: 4, height: 4, m: 9, beta: vec![0.0; 144], displacement: Some(vec![[f64::NAN, 0.0]; 16]) };
        assert!(render_p2s(&image, &bad, &basis).is_err());
    }
}
