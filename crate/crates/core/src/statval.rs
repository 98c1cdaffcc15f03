//! Turbulence statistics used to validate sampled fields: phase structure
//! function, long- and short-exposure OTFs, tilt correlation and differential
//! tilt variance, each with an analytic or numerically integrated reference.

use crate::correlation::aperture::{direct_sum, ApertureWeights};
use crate::error::{invalid, Result};
use crate::fft::{fast_len, Fft2};
use crate::fieldgen::ZernikeField;
use crate::splitstep::{ApertureFit, PropagationPlan, Propagator};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

pub const OTF_BINS: usize = 64;
pub const MIN_STRUCTURE_REALIZATIONS: usize = 100;
pub const MIN_OTF_FRAMES: usize = 200;
pub const MIN_TILT_FIELDS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OtfKind {
    Diffraction,
    Le,
    Se,
    EmpiricalLe,
    EmpiricalSe,
}

impl OtfKind {
    pub fn name(self) -> &'static str {
        match self {
            OtfKind::Diffraction => "diffraction",
            OtfKind::Le => "le",
            OtfKind::Se => "se",
            OtfKind::EmpiricalLe => "empirical-le",
            OtfKind::EmpiricalSe => "empirical-se",
        }
    }

    fn is_theoretical(self) -> bool {
        matches!(self, OtfKind::Diffraction | OtfKind::Le | OtfKind::Se)
    }
}

#[derive(Debug, Clone)]
pub struct OtfCurve {
    /// Frequency over the diffraction cutoff.
    pub nu: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: OtfKind,
    pub d_over_r0: f64,
    pub n_frames: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TiltComponents {
    /// `E[a2 a2']` averaged over x and y lags, with its standard error.
    pub a2: Vec<f64>,
    pub a2_err: Vec<f64>,
    pub a3: Vec<f64>,
    pub a3_err: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TiltStatsCurve {
    /// Separation in aperture diameters.
    pub s: Vec<f64>,
    pub corr: Vec<f64>,
    /// `2 (corr(0) - corr(s))`.
    pub dtv: Vec<f64>,
    pub d_over_r0: f64,
    pub n_fields: usize,
    pub components: Option<TiltComponents>,
    pub warnings: Vec<String>,
}

impl TiltStatsCurve {
    fn from_corr(s: Vec<f64>, corr: Vec<f64>, d_over_r0: f64, n_fields: usize) -> Self {
        let c0 = corr.first().copied().unwrap_or(0.0);
        let dtv = corr.iter().map(|c| 2.0 * (c0 - c)).collect();
        Self { s, corr, dtv, d_over_r0, n_fields, components: None, warnings: Vec::new() }
    }

    /// The same curve scaled so that `corr(0) = 1`.
    pub fn normalized(&self) -> Self {
        let c0 = self.corr.first().copied().unwrap_or(1.0);
        let mut out = Self::from_corr(
            self.s.clone(),
            self.corr.iter().map(|c| c / c0).collect(),
            self.d_over_r0,
            self.n_fields,
        );
        out.warnings = self.warnings.clone();
        out
    }
}

#[derive(Debug, Clone)]
pub struct StructureCurve {
    /// Pair-weighted mean separation of each bin, in aperture diameters.
    pub r: Vec<f64>,
    /// Mean squared phase difference in rad².
    pub values: Vec<f64>,
    pub realizations: usize,
    pub warnings: Vec<String>,
}

impl StructureCurve {
    /// Linear interpolation at `r` diameters; `None` outside the sampled range.
    pub fn at(&self, r: f64) -> Option<f64> {
        let k = self.r.iter().position(|&x| x >= r)?;
        if k == 0 {
            return (self.r[0] == r).then(|| self.values[0]);
        }
        let t = (r - self.r[k - 1]) / (self.r[k] - self.r[k - 1]);
        Some(self.values[k - 1] + t * (self.values[k] - self.values[k - 1]))
    }
}

/// Writes a curve as CSV: a header naming the metadata, the metadata row, then `x,value` rows.
pub fn curve_csv(kind: &str, d_over_r0: f64, n_frames: usize, seed: u64, x: &[f64], y: &[f64]) -> String {
    let mut out = String::from("# kind,d_over_r0,n_frames,seed\n");
    let _ = writeln!(out, "# {kind},{d_over_r0},{n_frames},{seed}");
    for (a, b) in x.iter().zip(y) {
        let _ = writeln!(out, "{a},{b}");
    }
    out
}

impl OtfCurve {
    pub fn to_csv(&self, seed: u64) -> String {
        curve_csv(self.kind.name(), self.d_over_r0, self.n_frames, seed, &self.nu, &self.values)
    }

    /// RMS difference to `other` over samples with `nu <= nu_max`, evaluating `other` at the same `nu`.
    pub fn rms_deviation(&self, other: &OtfCurve, nu_max: f64) -> f64 {
        let pairs: Vec<f64> = self
            .nu
            .iter()
            .zip(&self.values)
            .zip(&other.values)
            .filter(|((nu, _), _)| **nu <= nu_max + 1e-12)
            .map(|((_, a), b)| (a - b).powi(2))
            .collect();
        (pairs.iter().sum::<f64>() / pairs.len().max(1) as f64).sqrt()
    }
}

impl TiltStatsCurve {
    pub fn corr_csv(&self, seed: u64) -> String {
        curve_csv("tilt-corr", self.d_over_r0, self.n_fields, seed, &self.s, &self.corr)
    }

    pub fn dtv_csv(&self, seed: u64) -> String {
        curve_csv("dtv", self.d_over_r0, self.n_fields, seed, &self.s, &self.dtv)
    }
}

impl StructureCurve {
    pub fn to_csv(&self, d_over_r0: f64, seed: u64) -> String {
        let x: Vec<f64> = self.r.iter().map(|r| r * d_over_r0).collect();
        curve_csv("structure", d_over_r0, self.realizations, seed, &x, &self.values)
    }
}

/// OTF of an aberration-free circular pupil at `u = ν/ν_c`.
pub fn diffraction_otf(u: f64) -> f64 {
    if u <= 0.0 {
        return 1.0;
    }
    if u >= 1.0 {
        return 0.0;
    }
    2.0 / PI * (u.acos() - u * (1.0 - u * u).sqrt())
}

/// Analytic OTF on a grid of normalized frequencies. At `u = ν/ν_c` the product
/// `λfν` equals `u·D`, so the turbulence exponent is `3.44 (u·D/r0)^{5/3}`.
pub fn theoretical_otf(kind: OtfKind, d_over_r0: f64, nu: &[f64]) -> Result<OtfCurve> {
    if !kind.is_theoretical() {
        return invalid(format!("{} is not an analytic OTF kind", kind.name()));
    }
    if !(d_over_r0 >= 0.0) {
        return invalid("d_over_r0 must be non-negative");
    }
    let values = nu
        .iter()
        .map(|&u| {
            let u = u.clamp(0.0, 1.0);
            let h0 = diffraction_otf(u);
            let e = 3.44 * (u * d_over_r0).powf(5.0 / 3.0);
            match kind {
                OtfKind::Diffraction => h0,
                OtfKind::Le => h0 * (-e).exp(),
                _ => h0 * (-e * (1.0 - u.cbrt())).exp(),
            }
        })
        .collect();
    Ok(OtfCurve { nu: nu.to_vec(), values, kind, d_over_r0, n_frames: 0, warnings: Vec::new() })
}

/// A `g × g` pupil with in-disk pixel centres and the FFT grid used for autocorrelations.
struct PupilGrid {
    g: usize,
    p: usize,
    mask: Vec<f64>,
    fft: Fft2,
}

impl PupilGrid {
    fn new(g: usize, mask: Vec<f64>) -> Self {
        let p = fast_len(2 * g);
        Self { g, p, mask, fft: Fft2::new(p, p) }
    }

    fn embed(&self, f: impl Fn(usize) -> Complex64) -> Vec<Complex64> {
        let mut buf = vec![Complex64::default(); self.p * self.p];
        for r in 0..self.g {
            for c in 0..self.g {
                buf[r * self.p + c] = f(r * self.g + c);
            }
        }
        buf
    }

    /// Pair-count autocorrelation of the mask on the padded grid.
    fn mask_pairs(&mut self) -> Vec<f64> {
        let mask = self.mask.clone();
        let mut m = self.embed(|k| Complex64::new(mask[k], 0.0));
        self.fft.forward(&mut m);
        m.iter_mut().for_each(|v| *v = Complex64::new(v.norm_sqr(), 0.0));
        self.fft.inverse(&mut m);
        let s = 1.0 / (self.p * self.p) as f64;
        m.iter().map(|v| (v.re * s).round()).collect()
    }

    /// Signed lag of padded index `k`.
    fn lag(&self, k: usize) -> isize {
        if k <= self.p / 2 {
            k as isize
        } else {
            k as isize - self.p as isize
        }
    }
}

/// Accumulates `Σ (φ(x) - φ(x+ℓ))²` over in-mask pairs for every lag `ℓ`.
pub struct StructureAccumulator {
    grid: PupilGrid,
    pixel_d: f64,
    sums: Vec<f64>,
    count: usize,
}

impl StructureAccumulator {
    /// `mask` is row-major `g × g` with entries 0 or 1; `pixel_d` is the pixel size in diameters.
    pub fn new(g: usize, mask: Vec<f64>, pixel_d: f64) -> Result<Self> {
        if mask.len() != g * g {
            return invalid("mask does not match the grid");
        }
        let grid = PupilGrid::new(g, mask);
        let n = grid.p * grid.p;
        Ok(Self { grid, pixel_d, sums: vec![0.0; n], count: 0 })
    }

    /// Adds one phase realization (row-major `g × g`, values outside the mask ignored).
    pub fn add(&mut self, phase: &[f64]) {
        let g = &mut self.grid;
        let mask = &g.mask;
        // p = Mφ in the real part, q = Mφ² in the imaginary part.
        let mut z = g.embed(|k| Complex64::new(mask[k] * phase[k], mask[k] * phase[k] * phase[k]));
        let mut m = g.embed(|k| Complex64::new(mask[k], 0.0));
        g.fft.forward(&mut z);
        g.fft.forward(&mut m);
        let p = g.p;
        let mut s = vec![Complex64::default(); p * p];
        for r in 0..p {
            let nr = (p - r) % p;
            for c in 0..p {
                let nc = (p - c) % p;
                let a = z[r * p + c];
                let b = z[nr * p + nc].conj();
                let fp = (a + b) * 0.5;
                let fq = (a - b) * Complex64::new(0.0, -0.5);
                // C_qm + C_mq - 2 C_pp, with C_fg = IFFT(conj(F f) F g).
                s[r * p + c] = fq.conj() * m[r * p + c] + m[r * p + c].conj() * fq - 2.0 * fp.norm_sqr();
            }
        }
        g.fft.inverse(&mut s);
        let scale = 1.0 / (p * p) as f64;
        self.sums.iter_mut().zip(&s).for_each(|(acc, v)| *acc += v.re * scale);
        self.count += 1;
    }

    pub fn realizations(&self) -> usize {
        self.count
    }

    /// Radially binned curve; bin `k` collects lags with `|ℓ|` rounding to `k` pixels and at
    /// least `min_pairs` pixel pairs per lag.
    pub fn finish(mut self, min_pairs: f64) -> StructureCurve {
        let pairs = self.grid.mask_pairs();
        let g = &self.grid;
        let nbins = g.g;
        let mut num = vec![0.0; nbins];
        let mut den = vec![0.0; nbins];
        let mut rad = vec![0.0; nbins];
        for r in 0..g.p {
            for c in 0..g.p {
                let n = pairs[r * g.p + c];
                if n < min_pairs.max(1.0) {
                    continue;
                }
                let d = (g.lag(r) as f64).hypot(g.lag(c) as f64);
                let k = d.round() as usize;
                if k >= nbins {
                    continue;
                }
                num[k] += self.sums[r * g.p + c];
                den[k] += n;
                rad[k] += n * d;
            }
        }
        let realizations = self.count.max(1) as f64;
        let mut curve = StructureCurve { r: Vec::new(), values: Vec::new(), realizations: self.count, warnings: Vec::new() };
        for k in 0..nbins {
            if den[k] > 0.0 {
                curve.r.push(rad[k] / den[k] * self.pixel_d);
                curve.values.push(num[k] / (den[k] * realizations));
            }
        }
        if self.count < MIN_STRUCTURE_REALIZATIONS {
            curve.warnings.push(format!(
                "only {} phase realizations; at least {MIN_STRUCTURE_REALIZATIONS} are needed for a stable estimate",
                self.count
            ));
        }
        self.sums.clear();
        curve
    }
}

/// Evenly spread pixel positions, `per_field` of them, on a field of `h × w`.
fn sample_pixels(h: usize, w: usize, per_field: usize) -> Vec<(usize, usize)> {
    let side = (per_field as f64).sqrt().ceil() as usize;
    let mut out = Vec::with_capacity(per_field);
    'outer: for a in 0..side {
        for b in 0..side {
            if out.len() == per_field {
                break 'outer;
            }
            out.push(((2 * a + 1) * h / (2 * side), (2 * b + 1) * w / (2 * side)));
        }
    }
    out
}

/// Structure function of pupil phases rebuilt from coefficient vectors of `fields`
/// on a `g`-pixel pupil, using `per_field` pixels of each field.
pub fn empirical_structure_function(fields: &[ZernikeField], g: usize, per_field: usize) -> Result<StructureCurve> {
    let Some(first) = fields.first() else {
        return invalid("no fields given");
    };
    if per_field == 0 {
        return invalid("at least one pixel per field is required");
    }
    let basis = crate::zernike::PupilBasis::new(g, first.num_modes)?;
    let mut acc = StructureAccumulator::new(g, basis.mask(), 1.0 / g as f64)?;
    let mut phase = vec![0.0; g * g];
    for f in fields {
        for (y, x) in sample_pixels(f.height, f.width, per_field) {
            basis.phase_into(f.coeffs(y, x), &mut phase)?;
            acc.add(&phase);
        }
    }
    Ok(acc.finish(g as f64))
}

/// Structure function of aperture phases from the split-step propagator: each trial
/// draws fresh screens, propagates an on-axis point and unwraps the phase relative to vacuum.
pub fn splitstep_structure_function(plan: &PropagationPlan, n_trials: usize, seed: u64) -> Result<StructureCurve> {
    let fit = ApertureFit::new(plan, 3)?;
    let mut prop = Propagator::new(plan);
    let vac = prop.propagate([0.0, 0.0], &[])?;
    let n = plan.n;
    let (mut r0, mut r1, mut c0, mut c1) = (n, 0, n, 0);
    for &p in &fit.pixels {
        let (r, c) = (p / n, p % n);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    let g = (r1 - r0).max(c1 - c0) + 1;
    let mut mask = vec![0.0; g * g];
    let local = |p: usize| (p / n - r0) * g + (p % n - c0);
    for &p in &fit.pixels {
        mask[local(p)] = 1.0;
    }
    let mut acc = StructureAccumulator::new(g, mask, 1.0 / plan.samples_across as f64)?;
    let mut sfft = Fft2::new(plan.screen_size(), plan.screen_size());
    let mut phase = vec![0.0; g * g];
    let mut done = 0;
    let mut stream = 0u64;
    while done < n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        stream += 1;
        let spectra = plan.draw_spectra(&mut rng)?;
        let parts: Vec<(Vec<f64>, Vec<f64>)> = spectra.iter().map(|s| s.realize(&mut sfft, [0.0, 0.0])).collect();
        for half in 0..2 {
            if done == n_trials {
                break;
            }
            let screens: Vec<Vec<f64>> =
                parts.iter().map(|(a, b)| plan.crop(if half == 0 { a } else { b })).collect();
            let refs: Vec<&[f64]> = screens.iter().map(|s| s.as_slice()).collect();
            let u = prop.propagate([0.0, 0.0], &refs)?;
            let ratio: Vec<Complex64> = u.iter().zip(&vac).map(|(a, b)| a * b.conj()).collect();
            let unwrapped = fit.unwrap(&ratio);
            for (&p, v) in fit.pixels.iter().zip(&unwrapped) {
                phase[local(p)] = *v;
            }
            acc.add(&phase);
            done += 1;
        }
    }
    Ok(acc.finish(g as f64 / 2.0))
}

/// Mean complex pupil autocorrelation, optionally with the best-fit plane removed per realization.
pub struct OtfAccumulator {
    grid: PupilGrid,
    coords: Vec<(f64, f64)>,
    plane_inv: [[f64; 3]; 3],
    remove_tilt: bool,
    power: Vec<f64>,
    count: usize,
}

impl OtfAccumulator {
    pub fn new(g: usize, mask: Vec<f64>, remove_tilt: bool) -> Result<Self> {
        if mask.len() != g * g {
            return invalid("mask does not match the grid");
        }
        let coords: Vec<(f64, f64)> = (0..g * g)
            .map(|k| (crate::zernike::pupil_coord(k % g, g), crate::zernike::pupil_coord(k / g, g)))
            .collect();
        let mut m = nalgebra::Matrix3::<f64>::zeros();
        for (k, &(x, y)) in coords.iter().enumerate() {
            if mask[k] > 0.0 {
                let v = nalgebra::Vector3::new(1.0, x, y);
                m += v * v.transpose();
            }
        }
        let inv = m.try_inverse().unwrap_or_else(nalgebra::Matrix3::zeros);
        let plane_inv = [[inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]], [inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]], [
            inv[(2, 0)],
            inv[(2, 1)],
            inv[(2, 2)],
        ]];
        let grid = PupilGrid::new(g, mask);
        let n = grid.p * grid.p;
        Ok(Self { grid, coords, plane_inv, remove_tilt, power: vec![0.0; n], count: 0 })
    }

    /// Least-squares plane `c0 + c1 x + c2 y` through the in-mask phase.
    fn plane(&self, phase: &[f64]) -> [f64; 3] {
        let mut b = [0.0; 3];
        for (k, &(x, y)) in self.coords.iter().enumerate() {
            if self.grid.mask[k] > 0.0 {
                b[0] += phase[k];
                b[1] += x * phase[k];
                b[2] += y * phase[k];
            }
        }
        let m = &self.plane_inv;
        [0, 1, 2].map(|i| m[i][0] * b[0] + m[i][1] * b[1] + m[i][2] * b[2])
    }

    pub fn add(&mut self, phase: &[f64]) {
        let c = if self.remove_tilt { self.plane(phase) } else { [0.0; 3] };
        let (mask, coords) = (&self.grid.mask, &self.coords);
        let mut z = self.grid.embed(|k| {
            let (x, y) = coords[k];
            Complex64::from_polar(mask[k], phase[k] - c[0] - c[1] * x - c[2] * y)
        });
        self.grid.fft.forward(&mut z);
        self.power.iter_mut().zip(&z).for_each(|(acc, v)| *acc += v.norm_sqr());
        self.count += 1;
    }

    pub fn realizations(&self) -> usize {
        self.count
    }

    /// Radially averaged real part of the mean autocorrelation, normalized at zero lag,
    /// in `OTF_BINS` bins of width `1/OTF_BINS` in `ν/ν_c`.
    pub fn finish(mut self, kind: OtfKind, d_over_r0: f64, n_frames: usize) -> OtfCurve {
        let g = &mut self.grid;
        let mut a: Vec<Complex64> = self.power.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        g.fft.inverse(&mut a);
        let zero = a[0].re;
        let mut sum = vec![0.0; OTF_BINS];
        let mut rad = vec![0.0; OTF_BINS];
        let mut cnt = vec![0usize; OTF_BINS];
        for r in 0..g.p {
            for c in 0..g.p {
                let u = (g.lag(r) as f64).hypot(g.lag(c) as f64) / g.g as f64;
                let k = (u * OTF_BINS as f64).round() as usize;
                if k >= OTF_BINS {
                    continue;
                }
                sum[k] += a[r * g.p + c].re / zero;
                rad[k] += u;
                cnt[k] += 1;
            }
        }
        let mut nu = Vec::new();
        let mut values = Vec::new();
        for k in 0..OTF_BINS {
            if cnt[k] > 0 {
                nu.push(rad[k] / cnt[k] as f64);
                values.push(sum[k] / cnt[k] as f64);
            }
        }
        OtfCurve { nu, values, kind, d_over_r0, n_frames, warnings: Vec::new() }
    }
}

/// Long- or short-exposure OTF from `per_field` pixels of each field, on a `g`-pixel pupil.
pub fn empirical_otf(kind: OtfKind, fields: &[ZernikeField], d_over_r0: f64, g: usize, per_field: usize) -> Result<OtfCurve> {
    let remove_tilt = match kind {
        OtfKind::Le | OtfKind::EmpiricalLe => false,
        OtfKind::Se | OtfKind::EmpiricalSe => true,
        OtfKind::Diffraction => return invalid("the diffraction OTF has no empirical estimate"),
    };
    if fields.len() < MIN_OTF_FRAMES {
        return invalid(format!("need at least {MIN_OTF_FRAMES} frames, got {}", fields.len()));
    }
    if per_field == 0 {
        return invalid("at least one pixel per field is required");
    }
    let basis = crate::zernike::PupilBasis::new(g, fields[0].num_modes)?;
    let mut acc = OtfAccumulator::new(g, basis.mask(), remove_tilt)?;
    let mut phase = vec![0.0; g * g];
    for f in fields {
        for (y, x) in sample_pixels(f.height, f.width, per_field) {
            basis.phase_into(f.coeffs(y, x), &mut phase)?;
            acc.add(&phase);
        }
    }
    let kind = if remove_tilt { OtfKind::EmpiricalSe } else { OtfKind::EmpiricalLe };
    Ok(acc.finish(kind, d_over_r0, fields.len()))
}

/// Tilt correlation `E[a2 a2' + a3 a3']` along a separation of `s` diameters, normalized at
/// zero, integrated over the aperture by the same discrete projection used for the kernels.
/// `q` is the number of aperture samples per diameter.
pub fn theoretical_tilt_stats(s: &[f64], q: f64, d_over_r0: f64) -> Result<TiltStatsCurve> {
    if !(q >= 8.0) {
        return invalid("need at least 8 aperture samples per diameter");
    }
    if s.first() != Some(&0.0) {
        return invalid("the separation grid must start at 0");
    }
    let eval = |q: f64, s: &[f64]| -> Vec<f64> {
        let ap = ApertureWeights::new(q, 3);
        let o2 = ap.overlap(2, 2);
        let o3 = ap.overlap(3, 3);
        s.iter().map(|&d| direct_sum(&o2, d, 0.0) + direct_sum(&o3, d, 0.0)).collect()
    };
    let raw = eval(q, s);
    let corr: Vec<f64> = raw.iter().map(|v| v / raw[0]).collect();
    let mut curve = TiltStatsCurve::from_corr(s.to_vec(), corr, d_over_r0, 0);
    let probes: Vec<f64> = [0.0, 0.5, 2.0].into_iter().collect();
    let coarse = eval(q / 2.0, &probes);
    let fine = eval(q, &probes);
    let change = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a / coarse[0] - b / fine[0]).abs())
        .fold(0.0, f64::max);
    if change > 1e-3 {
        curve.warnings.push(format!("tilt quadrature changes by {change:.2e} when halving the aperture sampling"));
    }
    Ok(curve)
}

/// Tilt statistics from sampled fields at integer pixel `lags` (pixel pitch `pitch_s`
/// diameters). Pairs along both axes enter every lag, so each mode sees the mean of its
/// parallel and perpendicular correlation. The curve is unnormalized: `corr(0)` is the
/// mean tilt variance per axis.
pub fn empirical_tilt_stats(fields: &[ZernikeField], lags: &[usize], pitch_s: f64, d_over_r0: f64) -> Result<TiltStatsCurve> {
    if lags.first() != Some(&0) {
        return invalid("the lag grid must start at 0");
    }
    let Some(first) = fields.first() else {
        return invalid("no fields given");
    };
    if first.num_modes < 3 {
        return invalid("fields carry no tilt modes");
    }
    let (h, w) = (first.height, first.width);
    if lags.iter().any(|&k| k >= h.min(w)) {
        return invalid("lag exceeds the field size");
    }
    let nl = lags.len();
    // Per-field estimates, then mean and standard error across fields.
    let mut per = vec![vec![[0.0f64; 2]; fields.len()]; nl];
    for (fi, f) in fields.iter().enumerate() {
        if f.height != h || f.width != w {
            return invalid("fields differ in size");
        }
        for (li, &k) in lags.iter().enumerate() {
            let (mut s2, mut s3, mut n) = (0.0, 0.0, 0usize);
            for y in 0..h {
                for x in 0..w {
                    if x + k < w {
                        s2 += f.get(y, x, 2) * f.get(y, x + k, 2);
                        s3 += f.get(y, x, 3) * f.get(y, x + k, 3);
                        n += 1;
                    }
                    if k > 0 && y + k < h {
                        s2 += f.get(y, x, 2) * f.get(y + k, x, 2);
                        s3 += f.get(y, x, 3) * f.get(y + k, x, 3);
                        n += 1;
                    }
                }
            }
            per[li][fi] = [s2 / n as f64, s3 / n as f64];
        }
    }
    let nf = fields.len() as f64;
    let stats = |li: usize, m: usize| -> (f64, f64) {
        let mean = per[li].iter().map(|v| v[m]).sum::<f64>() / nf;
        let var = per[li].iter().map(|v| (v[m] - mean).powi(2)).sum::<f64>() / (nf - 1.0).max(1.0);
        (mean, (var / nf).sqrt())
    };
    let mut comp = TiltComponents { a2: vec![], a2_err: vec![], a3: vec![], a3_err: vec![] };
    for li in 0..nl {
        let (m2, e2) = stats(li, 0);
        let (m3, e3) = stats(li, 1);
        comp.a2.push(m2);
        comp.a2_err.push(e2);
        comp.a3.push(m3);
        comp.a3_err.push(e3);
    }
    let corr = comp.a2.iter().zip(&comp.a3).map(|(a, b)| 0.5 * (a + b)).collect();
    let s = lags.iter().map(|&k| k as f64 * pitch_s).collect();
    let mut curve = TiltStatsCurve::from_corr(s, corr, d_over_r0, fields.len());
    curve.components = Some(comp);
    if fields.len() < MIN_TILT_FIELDS {
        curve.warnings.push(format!(
            "only {} fields; at least {MIN_TILT_FIELDS} are needed for a stable estimate",
            fields.len()
        ));
    }
    Ok(curve)
}
