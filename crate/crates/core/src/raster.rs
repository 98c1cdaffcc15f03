//! Planar floating-point images with PNG and PGM/PPM I/O.

use crate::error::{invalid, Error, Result};
use crate::fft::Fft2;
use image::{DynamicImage, ExtendedColorType, ImageFormat};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Cursor;
use std::path::Path;

/// Intensities in `[0, 1]`, one row-major plane per channel (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<Vec<f64>>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return invalid("plane size does not match the raster dimensions");
        }
        Ok(Self { width, height, planes: vec![data] })
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    /// Luma plane (Rec. 601 weights for colour input).
    pub fn to_gray(&self) -> Vec<f64> {
        match self.planes.len() {
            3 => (0..self.width * self.height)
                .map(|k| 0.299 * self.planes[0][k] + 0.587 * self.planes[1][k] + 0.114 * self.planes[2][k])
                .collect(),
            _ => self.planes[0].clone(),
        }
    }

    fn from_dynamic(img: DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.to_rgb32f();
            let mut planes = vec![Vec::with_capacity(w * h); 3];
            for p in rgb.pixels() {
                for c in 0..3 {
                    planes[c].push(p.0[c] as f64);
                }
            }
            Self { width: w, height: h, planes }
        } else {
            let l = img.to_luma32f();
            Self { width: w, height: h, planes: vec![l.pixels().map(|p| p.0[0] as f64).collect()] }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_dynamic(image::open(path)?))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_dynamic(image::load_from_memory_with_format(bytes, ImageFormat::Png)?))
    }

    fn encode_samples(&self, sixteen: bool) -> (Vec<u8>, ExtendedColorType) {
        let n = self.width * self.height;
        let ch = self.channels();
        let q = |v: f64, max: f64| (v.clamp(0.0, 1.0) * max).round();
        let mut bytes = Vec::with_capacity(n * ch * if sixteen { 2 } else { 1 });
        for k in 0..n {
            for plane in &self.planes {
                if sixteen {
                    bytes.extend_from_slice(&(q(plane[k], 65535.0) as u16).to_ne_bytes());
                } else {
                    bytes.push(q(plane[k], 255.0) as u8);
                }
            }
        }
        let color = match (ch, sixteen) {
            (3, false) => ExtendedColorType::Rgb8,
            (3, true) => ExtendedColorType::Rgb16,
            (_, false) => ExtendedColorType::L8,
            (_, true) => ExtendedColorType::L16,
        };
        (bytes, color)
    }

    pub fn to_png_bytes(&self, sixteen: bool) -> Result<Vec<u8>> {
        let (bytes, color) = self.encode_samples(sixteen);
        let mut out = Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            ImageFormat::Png,
        )?;
        Ok(out.into_inner())
    }

    /// Format from the extension: `.png`, or `.pgm`/`.ppm`/`.pnm` (8-bit).
    pub fn save(&self, path: &Path, sixteen: bool) -> Result<()> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let (format, sixteen) = match ext.as_str() {
            "png" => (ImageFormat::Png, sixteen),
            "pgm" | "ppm" | "pnm" => (ImageFormat::Pnm, false),
            _ => return Err(Error::Format(format!("unsupported image extension {:?}", ext))),
        };
        let (bytes, color) = self.encode_samples(sixteen);
        image::save_buffer_with_format(path, &bytes, self.width as u32, self.height as u32, color, format)?;
        Ok(())
    }
}

/// Deterministic natural-looking test scene: a `1/f` texture overlaid with a few
/// hard-edged shapes and a bar target, scaled into `[0.05, 0.95]`.
pub fn natural_scene(width: usize, height: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex64> =
        (0..width * height).map(|_| Complex64::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut fft = Fft2::new(height, width);
    fft.forward(&mut buf);
    for r in 0..height {
        let fy = (if r <= height / 2 { r as f64 } else { r as f64 - height as f64 }) / height as f64;
        for c in 0..width {
            let fx = (if c <= width / 2 { c as f64 } else { c as f64 - width as f64 }) / width as f64;
            let f = fx.hypot(fy);
            buf[r * width + c] *= if f == 0.0 { 0.0 } else { 1.0 / f };
        }
    }
    fft.inverse(&mut buf);
    let mut img: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let (lo, hi) = img.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    img.iter_mut().for_each(|v| *v = 0.25 + 0.5 * (*v - lo) / (hi - lo).max(1e-12));

    let (w, h) = (width as f64, height as f64);
    for _ in 0..6 {
        let (cx, cy) = (rng.random::<f64>() * w, rng.random::<f64>() * h);
        let size = (0.05 + 0.15 * rng.random::<f64>()) * w.min(h);
        let level: f64 = rng.random();
        let disk = rng.random::<bool>();
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disk { dx.hypot(dy) < size } else { dx.abs() < size && dy.abs() < 0.6 * size };
                if inside {
                    let v = &mut img[y * width + x];
                    *v = 0.3 * *v + 0.7 * level;
                }
            }
        }
    }
    // Bar target in the lower-left quadrant with periods of 2 to 8 pixels.
    let bar_h = height / 6;
    let mut x0 = width / 16;
    for period in [8usize, 6, 4, 3, 2] {
        for k in 0..3 * period {
            let x = x0 + k;
            if x >= width {
                break;
            }
            let on = (k / period.div_ceil(2)) % 2 == 0;
            for y in height - height / 16 - bar_h..height - height / 16 {
                img[y * width + x] = if on { 0.9 } else { 0.1 };
            }
        }
        x0 += 3 * period + 2;
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.05, 0.95));
    Raster { width, height, planes: vec![img] }
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_16_bit() {
        let r = natural_scene(24, 16, 3);
        let back = Raster::from_png_bytes(&r.to_png_bytes(true).unwrap()).unwrap();
        assert_eq!((back.width, back.height, back.channels()), (24, 16, 1));
        for (a, b) in r.planes[0].iter().zip(&back.planes[0]) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn rgb_and_pgm_files() {
        let dir = std::env::temp_dir().join(format!("raster-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let g = natural_scene(8, 8, 1);
        let rgb = Raster { width: 8, height: 8, planes: vec![g.planes[0].clone(); 3] };
        rgb.save(&dir.join("a.png"), false).unwrap();
        let back = Raster::load(&dir.join("a.png")).unwrap();
        assert_eq!(back.channels(), 3);
        g.save(&dir.join("b.pgm"), false).unwrap();
        let back = Raster::load(&dir.join("b.pgm")).unwrap();
        assert_eq!(back.channels(), 1);
        assert!((back.planes[0][5] - g.planes[0][5]).abs() <= 0.5 / 255.0 + 1e-7);
        assert!(g.save(&dir.join("c.bmp"), false).is_err());
        let _ = std::fs::remove_dir_all(dir);
    }

    #[test]
    fn scene_is_deterministic_and_bounded() {
        let a = natural_scene(64, 48, 9);
        assert_eq!(a, natural_scene(64, 48, 9));
        assert!(a.planes[0].iter().all(|v| (0.05..=0.95).contains(v)));
        assert_ne!(a, natural_scene(64, 48, 10));
    }
}
