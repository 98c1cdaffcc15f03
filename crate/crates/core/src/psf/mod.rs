//! PSF synthesis from pupil phase, the phase-to-space basis, and rendering.
//!
//! A PSF sample is `|F{P e^{-jφ}}|²` evaluated on the image pixel grid: the
//! pupil is zero-padded by the factor `λ / (D · pixel angle)` so one frequency
//! bin is one image pixel. Only the central `K × K` bins are ever used, so the
//! padded transform is evaluated as two small DFT matrix products instead of a
//! full FFT; the values are the same, and non-integer padding factors need no
//! rounding.

mod basis;
mod render;

pub use basis::{feature_dim, p2s_fit, FitOptions, PsfBasis, TSPB_MAGIC, TSPB_VERSION};
pub use render::{
    beta_planes, displacement_map, render_exact, render_frame, render_p2s, BetaSource, P2sInput, RenderMode, RenderedFrame,
};

use crate::config::OpticalConfig;
use crate::error::{invalid, Result};
use crate::zernike::PupilBasis;
use num_complex::Complex64;
use std::f64::consts::PI;

/// Reusable PSF synthesizer for one pupil sampling, kernel size and padding factor.
#[derive(Debug, Clone)]
pub struct PsfSynth {
    pub g: usize,
    pub k: usize,
    pub pad: f64,
    pupil: PupilBasis,
    /// `K × G` DFT rows: `exp(-2πi (k - K/2)(i + 1/2 - G/2) / (pad G))`.
    dft: Vec<Complex64>,
    field: Vec<Complex64>,
    partial: Vec<Complex64>,
    phase: Vec<f64>,
}

impl PsfSynth {
    pub fn new(config: &OpticalConfig) -> Result<Self> {
        config.validate()?;
        Self::with_params(config.phase_grid_px, config.psf_kernel_px, config.pad_factor(), config.num_modes)
    }

    pub fn with_params(g: usize, k: usize, pad: f64, num_modes: usize) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return invalid(format!("PSF kernel size must be odd, got {k}"));
        }
        if !(pad >= 1.0) {
            return invalid(format!("padding factor must be at least 1, got {pad}"));
        }
        let padded = (pad * g as f64).round() as usize;
        if k > padded {
            return invalid(format!("PSF kernel of {k} px exceeds the {padded} px padded transform"));
        }
        let pupil = PupilBasis::new(g, num_modes)?;
        let n = pad * g as f64;
        let mut dft = Vec::with_capacity(k * g);
        for kk in 0..k {
            let f = kk as f64 - (k / 2) as f64;
            for i in 0..g {
                let u = i as f64 + 0.5 - g as f64 / 2.0;
                dft.push(Complex64::from_polar(1.0, -2.0 * PI * f * u / n));
            }
        }
        Ok(Self {
            g,
            k,
            pad,
            pupil,
            dft,
            field: vec![Complex64::default(); g * g],
            partial: vec![Complex64::default(); g * k],
            phase: vec![0.0; g * g],
        })
    }

    pub fn num_modes(&self) -> usize {
        self.pupil.num_modes
    }

    /// Image-plane shift in pixels per radian of tilt coefficient (`a2` moves along x, `a3` along y).
    pub fn shift_per_radian(&self) -> f64 {
        -2.0 * self.pad / PI
    }

    /// Unit-sum `K × K` PSF of a `G × G` phase screen (values outside the pupil are ignored).
    pub fn psf_from_phase(&mut self, phase: &[f64], out: &mut [f64]) -> Result<()> {
        let g = self.g;
        if phase.len() != g * g {
            return invalid("phase buffer has the wrong size");
        }
        self.field.fill(Complex64::default());
        for &p in &self.pupil.pixels {
            self.field[p] = Complex64::from_polar(1.0, -phase[p]);
        }
        self.transform(out)
    }

    /// Unit-sum PSF of a complex `G × G` pupil field, masked to the pupil disk.
    pub fn psf_from_field(&mut self, field: &[Complex64], out: &mut [f64]) -> Result<()> {
        let g = self.g;
        if field.len() != g * g {
            return invalid("pupil field has the wrong size");
        }
        self.field.fill(Complex64::default());
        for &p in &self.pupil.pixels {
            self.field[p] = field[p];
        }
        self.transform(out)
    }

    fn transform(&mut self, out: &mut [f64]) -> Result<()> {
        let (g, k) = (self.g, self.k);
        if out.len() != k * k {
            return invalid("output buffer has the wrong size");
        }
        // Rows: partial[r][kc] = Σ_c field[r][c] E[kc][c].
        for r in 0..g {
            let row = &self.field[r * g..(r + 1) * g];
            if row.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
                self.partial[r * k..(r + 1) * k].fill(Complex64::default());
                continue;
            }
            for kc in 0..k {
                let e = &self.dft[kc * g..(kc + 1) * g];
                self.partial[r * k + kc] = row.iter().zip(e).map(|(a, b)| a * b).sum();
            }
        }
        // Columns: F[kr][kc] = Σ_r E[kr][r] partial[r][kc].
        let mut total = 0.0;
        for kr in 0..k {
            let e = &self.dft[kr * g..(kr + 1) * g];
            let dst = &mut out[kr * k..(kr + 1) * k];
            let mut acc = vec![Complex64::default(); k];
            for (r, er) in e.iter().enumerate() {
                let src = &self.partial[r * k..(r + 1) * k];
                for (a, s) in acc.iter_mut().zip(src) {
                    *a += er * s;
                }
            }
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = a.norm_sqr();
                total += *d;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        Ok(())
    }

    /// PSF of the phase `Σ a_j Z_j` (Noll-indexed, `coeffs[0]` is piston).
    pub fn psf_from_coeffs(&mut self, coeffs: &[f64], out: &mut [f64]) -> Result<()> {
        let mut phase = std::mem::take(&mut self.phase);
        let r = self.pupil.phase_into(coeffs, &mut phase).and_then(|_| self.psf_from_phase(&phase, out));
        self.phase = phase;
        r
    }
}

/// One-shot PSF of a `G × G` phase screen at the config's padding factor.
pub fn psf_from_phase(phase: &[f64], config: &OpticalConfig, k: usize) -> Result<Vec<f64>> {
    let g = (phase.len() as f64).sqrt().round() as usize;
    if g * g != phase.len() {
        return invalid("phase screen must be square");
    }
    config.validate()?;
    let mut s = PsfSynth::with_params(g, k, config.pad_factor(), 1)?;
    let mut out = vec![0.0; k * k];
    s.psf_from_phase(phase, &mut out)?;
    Ok(out)
}
