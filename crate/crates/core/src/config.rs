//! Imaging geometry and turbulence strength.

use crate::error::{invalid, Result};
use crate::optics::fried_from_cn2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalConfig {
    pub aperture_diameter_m: f64,
    pub wavelength_m: f64,
    pub path_length_m: f64,
    pub focal_length_m: f64,
    pub d_over_r0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cn2_m_neg2_3: Option<f64>,
    pub num_modes: usize,
    pub image_width_px: usize,
    pub image_height_px: usize,
    /// Object-plane width covered by the image.
    pub scene_width_m: f64,
    pub psf_kernel_px: usize,
    /// Pupil samples across the aperture diameter.
    pub phase_grid_px: usize,
}

impl Default for OpticalConfig {
    /// 10 cm aperture over 1 km at 525 nm, 256² image whose pixel matches a
    /// quarter of the diffraction angle λ/D.
    fn default() -> Self {
        Self {
            aperture_diameter_m: 0.1,
            wavelength_m: 525e-9,
            path_length_m: 1000.0,
            focal_length_m: 0.3,
            d_over_r0: 2.0,
            cn2_m_neg2_3: None,
            num_modes: 36,
            image_width_px: 256,
            image_height_px: 256,
            scene_width_m: 0.336,
            psf_kernel_px: 33,
            phase_grid_px: 64,
        }
    }
}

impl OpticalConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("aperture_diameter_m", self.aperture_diameter_m),
            ("wavelength_m", self.wavelength_m),
            ("path_length_m", self.path_length_m),
            ("focal_length_m", self.focal_length_m),
            ("scene_width_m", self.scene_width_m),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.d_over_r0 >= 0.0 && self.d_over_r0.is_finite()) {
            return invalid(format!("d_over_r0 must be non-negative, got {}", self.d_over_r0));
        }
        if self.num_modes < 3 {
            return invalid(format!("num_modes must be at least 3, got {}", self.num_modes));
        }
        if self.psf_kernel_px % 2 == 0 || self.psf_kernel_px == 0 {
            return invalid(format!("psf_kernel_px must be odd, got {}", self.psf_kernel_px));
        }
        if self.phase_grid_px < 32 {
            return invalid(format!("phase_grid_px must be at least 32, got {}", self.phase_grid_px));
        }
        if self.image_width_px == 0 || self.image_height_px == 0 {
            return invalid("image dimensions must be non-zero");
        }
        if let Some(cn2) = self.cn2_m_neg2_3 {
            let r0 = fried_from_cn2(cn2, self.wavelength_m, self.path_length_m)?;
            let implied = self.aperture_diameter_m / r0;
            if ((implied - self.d_over_r0) / implied).abs() > 1e-9 {
                return invalid(format!(
                    "cn2 implies d_over_r0 = {implied}, but d_over_r0 = {}",
                    self.d_over_r0
                ));
            }
        }
        let pad = self.pad_factor();
        if 2.44 * pad < 6.0 {
            return invalid(format!(
                "pixels are too coarse: the Airy core spans {:.2} px (< 6); reduce scene_width_m",
                2.44 * pad
            ));
        }
        if self.psf_fft_size() < self.psf_kernel_px {
            return invalid("psf_kernel_px exceeds the PSF FFT size");
        }
        Ok(())
    }

    /// Sets the strength from Cn² and records it.
    pub fn with_cn2(mut self, cn2: f64) -> Result<Self> {
        let r0 = fried_from_cn2(cn2, self.wavelength_m, self.path_length_m)?;
        self.d_over_r0 = self.aperture_diameter_m / r0;
        self.cn2_m_neg2_3 = Some(cn2);
        Ok(self)
    }

    /// Fried parameter in metres; infinite for a turbulence-free path.
    pub fn r0(&self) -> f64 {
        if self.d_over_r0 == 0.0 {
            f64::INFINITY
        } else {
            self.aperture_diameter_m / self.d_over_r0
        }
    }

    /// Object-plane pixel pitch in units of the aperture diameter.
    pub fn pixel_s(&self) -> f64 {
        self.scene_width_m / (self.image_width_px as f64 * self.aperture_diameter_m)
    }

    /// Angular size of an image pixel.
    pub fn pixel_angle(&self) -> f64 {
        self.scene_width_m / (self.image_width_px as f64 * self.path_length_m)
    }

    /// Ratio of the diffraction angle λ/D to the pixel angle; also the
    /// zero-padding factor of the pupil FFT that makes PSF samples land on image pixels.
    pub fn pad_factor(&self) -> f64 {
        self.wavelength_m / (self.aperture_diameter_m * self.pixel_angle())
    }

    pub fn psf_fft_size(&self) -> usize {
        (self.pad_factor() * self.phase_grid_px as f64).round() as usize
    }

    /// Sensor pixel pitch implied by the focal length.
    pub fn sensor_pixel_m(&self) -> f64 {
        self.pixel_angle() * self.focal_length_m
    }

    /// Stable content hash (hex, 16 chars) of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
