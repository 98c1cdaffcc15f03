//! Dense-field turbulence simulation.
//!
//! Per-pixel Zernike coefficient fields are drawn by FFT sampling of
//! independent homogeneous fields followed by pointwise mixing with the
//! Cholesky factor of the Noll matrix, and images are blurred through a
//! low-rank PSF basis. A split-step propagator and analytic statistics serve
//! as oracles.

pub mod config;
pub mod correlation;
pub mod error;
pub mod fft;
pub mod fieldgen;
pub mod noll;
pub mod optics;
pub mod psf;
pub mod raster;
pub mod splitstep;
pub mod statval;
pub mod zernike;

pub use config::OpticalConfig;
pub use error::{Error, Result};
