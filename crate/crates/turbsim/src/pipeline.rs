//! Field sampling plus rendering for one sequence, shared by `generate` and the service.

use crate::config::{RunConfig, TemporalConfig};
use anyhow::{Context, Result};
use std::sync::Arc;
use std::time::Instant;
use turbsim_core::correlation::{CorrelationSpec, KernelOptions};
use turbsim_core::fieldgen::{frozen_buffer_dims, SamplerState, Temporal, ZernikeField};
use turbsim_core::noll::noll_covariance;
use turbsim_core::psf::{beta_planes, p2s_fit, render_exact, render_p2s, BetaSource, PsfBasis, RenderMode};
use turbsim_core::raster::Raster;
use turbsim_core::Error as CoreError;

/// Frames a frozen-flow buffer covers before it is redrawn.
pub const FROZEN_WINDOW: u64 = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct StageTimes {
    pub sample_ms: f64,
    pub beta_ms: f64,
    pub render_ms: f64,
}

fn temporal(config: &RunConfig) -> Temporal {
    match config.temporal {
        TemporalConfig::Independent => Temporal::Ar { alpha: 0.0 },
        TemporalConfig::Ar { alpha } => Temporal::Ar { alpha },
        TemporalConfig::Frozen { velocity_d_per_frame } => {
            Temporal::Frozen { velocity: velocity_d_per_frame, frames: FROZEN_WINDOW }
        }
    }
}

/// Correlation kernels covering the image, or the frozen-flow buffer.
pub fn build_spec(config: &RunConfig) -> Result<CorrelationSpec> {
    let o = &config.optics;
    let (mut h, mut w) = (o.image_height_px, o.image_width_px);
    if let Temporal::Frozen { velocity, frames } = temporal(config) {
        (h, w) = frozen_buffer_dims(h, w, o.pixel_s(), velocity, frames);
    }
    let spec = CorrelationSpec::build_raw(o.num_modes, o.d_over_r0, h, w, o.pixel_s(), KernelOptions::default())?;
    Ok(spec)
}

/// Loads the configured basis file or fits a fresh one.
pub fn obtain_basis(config: &RunConfig, seed: u64) -> Result<PsfBasis> {
    if let Some(path) = &config.basis.path {
        let b = PsfBasis::load(path).with_context(|| format!("loading basis {}", path.display()))?;
        b.check_config(&config.optics)?;
        return Ok(b);
    }
    let (basis, warnings) = p2s_fit(&config.optics, &config.basis.fit_options(seed))?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(basis)
}

pub struct Pipeline {
    pub config: RunConfig,
    pub spec: Arc<CorrelationSpec>,
    pub basis: Option<Arc<PsfBasis>>,
    sampler: SamplerState,
}

impl Pipeline {
    pub fn new(config: RunConfig, spec: Arc<CorrelationSpec>, basis: Option<Arc<PsfBasis>>, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.output.render == RenderMode::P2s && basis.is_none() {
            anyhow::bail!("P2S rendering needs a basis");
        }
        let o = &config.optics;
        let spec = if spec.meta.d_over_r0 == o.d_over_r0 { spec } else { Arc::new(spec.with_strength(o.d_over_r0)?) };
        let sampler = SamplerState::new(&spec, o.image_height_px, o.image_width_px, seed, temporal(&config))?;
        Ok(Self { config, spec, basis, sampler })
    }

    /// Index of the next frame.
    pub fn frame(&self) -> u64 {
        self.sampler.frame()
    }

    /// Changes turbulence strength without touching the kernels or the pre-mixing fields.
    pub fn set_strength(&mut self, d_over_r0: f64) -> Result<()> {
        self.sampler.set_noll(noll_covariance(self.config.optics.num_modes, d_over_r0)?)?;
        self.config.optics.d_over_r0 = d_over_r0;
        self.config.optics.cn2_m_neg2_3 = None;
        Ok(())
    }

    pub fn set_basis(&mut self, basis: Arc<PsfBasis>) -> Result<()> {
        basis.check_config(&self.config.optics)?;
        self.basis = Some(basis);
        Ok(())
    }

    pub fn next_field(&mut self) -> Result<ZernikeField> {
        match self.sampler.next_frame() {
            Err(CoreError::BufferExhausted { .. }) => {
                self.sampler.regenerate()?;
                Ok(self.sampler.next_frame()?)
            }
            other => Ok(other?),
        }
    }

    pub fn render(&self, source: &Raster, field: &ZernikeField) -> Result<(Raster, StageTimes)> {
        let mut t = StageTimes::default();
        let o = &self.config.optics;
        if source.width != o.image_width_px || source.height != o.image_height_px {
            anyhow::bail!(
                "image is {}x{} but the config expects {}x{}",
                source.width,
                source.height,
                o.image_width_px,
                o.image_height_px
            );
        }
        let out = match self.config.output.render {
            RenderMode::Exact => {
                let start = Instant::now();
                let img = render_exact(source, field, o)?;
                t.render_ms = ms(start);
                img
            }
            RenderMode::P2s => {
                let basis = self.basis.as_ref().context("no basis")?;
                let start = Instant::now();
                let input = beta_planes(field, basis, o, BetaSource::Regression)?;
                t.beta_ms = ms(start);
                let start = Instant::now();
                let img = render_p2s(source, &input, basis)?;
                t.render_ms = ms(start);
                img
            }
        };
        Ok((out, t))
    }

    /// Draws the next field and renders `source` through it.
    pub fn step(&mut self, source: &Raster) -> Result<(ZernikeField, Raster, StageTimes)> {
        let start = Instant::now();
        let field = self.next_field()?;
        let sample_ms = ms(start);
        let (img, mut t) = self.render(source, &field)?;
        t.sample_ms = sample_ms;
        Ok((field, img, t))
    }
}

pub fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}
