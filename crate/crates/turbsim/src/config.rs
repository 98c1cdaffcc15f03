//! Run configuration: optics plus temporal model, basis fitting and output options.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};
use turbsim_core::psf::{FitOptions, RenderMode};
use turbsim_core::OpticalConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub optics: OpticalConfig,
    #[serde(default)]
    pub temporal: TemporalConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optics: OpticalConfig::default(),
            temporal: TemporalConfig::default(),
            basis: BasisConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Frame-to-frame evolution of the coefficient fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum TemporalConfig {
    /// Every frame independent.
    Independent,
    Ar { alpha: f64 },
    /// Velocity in aperture diameters per frame.
    Frozen { velocity_d_per_frame: [f64; 2] },
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig::Ar { alpha: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub samples: usize,
    pub kernels: usize,
    pub ridge: Option<f64>,
    /// Pre-fitted TSPB file; fitted on the fly when absent.
    pub path: Option<PathBuf>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        let f = FitOptions::default();
        Self { samples: f.n_samples, kernels: f.m, ridge: f.ridge, path: None }
    }
}

impl BasisConfig {
    pub fn fit_options(&self, seed: u64) -> FitOptions {
        FitOptions { n_samples: self.samples, m: self.kernels, seed, ridge: self.ridge }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub render: RenderMode,
    pub png_16bit: bool,
    /// Also write each frame's coefficient field as TSZF.
    pub write_fields: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { render: RenderMode::P2s, png_16bit: false, write_fields: false }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optics.validate()?;
        match self.temporal {
            TemporalConfig::Ar { alpha } if !(0.0..=1.0).contains(&alpha) => {
                anyhow::bail!("temporal.alpha must lie in [0, 1], got {alpha}")
            }
            TemporalConfig::Frozen { velocity_d_per_frame: v } if v.iter().any(|x| !x.is_finite()) => {
                anyhow::bail!("temporal.velocity_d_per_frame must be finite")
            }
            _ => {}
        }
        if self.basis.kernels == 0 || self.basis.samples < 20 * self.basis.kernels {
            anyhow::bail!(
                "basis.samples ({}) must be at least 20 x basis.kernels ({})",
                self.basis.samples,
                self.basis.kernels
            );
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("invalid config JSON")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Same optics at `size × size` pixels with the pixel angle kept.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let mut out = self.clone();
        out.optics.scene_width_m = self.optics.scene_width_m * width as f64 / self.optics.image_width_px as f64;
        out.optics.image_width_px = width;
        out.optics.image_height_px = height;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

const OPTICS_KEYS: &[&str] = &[
    "aperture_diameter_m",
    "wavelength_m",
    "path_length_m",
    "focal_length_m",
    "d_over_r0",
    "cn2_m_neg2_3",
    "num_modes",
    "image_width_px",
    "image_height_px",
    "scene_width_m",
    "psf_kernel_px",
    "phase_grid_px",
];

/// Applies a partial JSON update to `current`, reporting problems per field.
pub fn patch_optics(current: &OpticalConfig, patch: &Value) -> std::result::Result<OpticalConfig, Vec<FieldError>> {
    let Some(obj) = patch.as_object() else {
        return Err(vec![FieldError { field: "".into(), message: "expected a JSON object".into() }]);
    };
    let base = serde_json::to_value(current).expect("config serializes");
    let merge = |keys: &Map<String, Value>| -> Value {
        let mut m = base.as_object().cloned().unwrap_or_default();
        for (k, v) in keys {
            if v.is_null() {
                m.remove(k);
            } else {
                m.insert(k.clone(), v.clone());
            }
        }
        Value::Object(m)
    };
    let mut errors = Vec::new();
    for (k, v) in obj {
        if !OPTICS_KEYS.contains(&k.as_str()) {
            errors.push(FieldError { field: k.clone(), message: "unknown parameter".into() });
            continue;
        }
        let single: Map<String, Value> = [(k.clone(), v.clone())].into_iter().collect();
        if let Err(e) = serde_json::from_value::<OpticalConfig>(merge(&single)) {
            errors.push(FieldError { field: k.clone(), message: e.to_string() });
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    let mut next: OpticalConfig = serde_json::from_value(merge(obj)).map_err(|e| {
        vec![FieldError { field: "".into(), message: e.to_string() }]
    })?;
    // A strength change without a new Cn² drops the stale Cn² rather than failing the consistency check.
    if obj.contains_key("d_over_r0") && !obj.contains_key("cn2_m_neg2_3") {
        next.cn2_m_neg2_3 = None;
    }
    if let Err(e) = next.validate() {
        let message = e.to_string();
        let field = OPTICS_KEYS
            .iter()
            .find(|k| message.contains(*k))
            .map_or_else(String::new, |k| k.to_string());
        return Err(vec![FieldError { field, message }]);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        let bad = text.replacen("\"d_over_r0\"", "\"d_over_r\"", 1);
        assert!(RunConfig::from_json(&bad).is_err());
        let minimal = format!("{{\"optics\": {}}}", serde_json::to_string(&cfg.optics).unwrap());
        assert_eq!(RunConfig::from_json(&minimal).unwrap(), cfg);
    }

    #[test]
    fn temporal_modes_parse() {
        let t: TemporalConfig = serde_json::from_value(json!({"mode": "frozen", "velocity_d_per_frame": [0.1, 0.0]})).unwrap();
        assert_eq!(t, TemporalConfig::Frozen { velocity_d_per_frame: [0.1, 0.0] });
        let t: TemporalConfig = serde_json::from_value(json!({"mode": "independent"})).unwrap();
        assert_eq!(t, TemporalConfig::Independent);
        assert!(serde_json::from_value::<TemporalConfig>(json!({"mode": "ar", "alpha": 0.5, "beta": 1})).is_err());
    }

    #[test]
    fn patch_reports_fields() {
        let cur = OpticalConfig::default();
        let ok = patch_optics(&cur, &json!({"d_over_r0": 0.0})).unwrap();
        assert_eq!(ok.d_over_r0, 0.0);
        let errs = patch_optics(&cur, &json!({"d_over_r0": "x", "bogus": 1})).unwrap_err();
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"d_over_r0") && fields.contains(&"bogus"), "{errs:?}");
        let errs = patch_optics(&cur, &json!({"d_over_r0": -1.0})).unwrap_err();
        assert_eq!(errs[0].field, "d_over_r0");
        assert!(patch_optics(&cur, &json!([1, 2])).is_err());
    }

    #[test]
    fn resize_keeps_pixel_angle() {
        let cfg = RunConfig::default();
        let r = cfg.resized(64, 32);
        assert!((r.optics.pixel_angle() - cfg.optics.pixel_angle()).abs() < 1e-18);
        assert_eq!(r.optics.image_height_px, 32);
    }
}
