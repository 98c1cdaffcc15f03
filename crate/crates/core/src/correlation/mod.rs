//! Zernike spatial correlation tensor and its homogeneous approximation.

pub mod aperture;
pub mod cache;
pub mod energy;
pub mod kernel;

pub use energy::{energy_metrics, tensor_slices, EnergyCurves, EnergySetup, PolarSlices};
pub use kernel::{
    build_autocorrelation, build_cross_correlation, CorrelationKernel, CorrelationSpec, KernelOptions, LagGrid, SpecMeta,
};
