//! Split-step wave-optics oracle: Kolmogorov FFT phase screens and scaled
//! angular-spectrum Fresnel steps from a point source to the aperture.
//!
//! The source is a sinc-Gaussian point source whose converging phase cancels
//! the path curvature, so the vacuum aperture field is a nearly flat patch of
//! width `droi`. The grid pitch varies linearly along the path from `delta_src`
//! to `delta_obs`; with that choice the intermediate quadratic phases telescope
//! and only the first and last are applied.
//!
//! Screen strengths are aperture-referred: a screen at fractional distance
//! `α = z / L` from the source with referred Fried parameter `r0'` is drawn
//! with physical `r0 = α r0'`, because rays converging on the source sample it
//! at `α` times the aperture separation. The referred values therefore
//! combine as `(Σ r0'^{-5/3})^{-3/5}` into the spherical-wave `r0` of the path.
//! FFT screens have no subharmonics, so tilt is underrepresented.

use crate::config::OpticalConfig;
use crate::error::{invalid, Error, Result};
use crate::fft::Fft2;
use crate::psf::PsfSynth;
use crate::zernike::ZernikePolynomial;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use statrs::function::erf::erf;
use std::time::Instant;

/// Kolmogorov phase PSD constant: `Φ(f) = 0.023 r0^{-5/3} f^{-11/3}` with `f` in cycles per metre.
const PSD_COEFF: f64 = 0.023;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseScreen {
    pub size: usize,
    pub pitch: f64,
    pub r0: f64,
    pub z: f64,
    pub seed: u64,
    /// Row-major `size × size`, radians.
    pub data: Vec<f64>,
}

/// Filtered complex white noise; its inverse FFT gives two independent screens (real and imaginary parts).
#[derive(Debug, Clone)]
pub struct ScreenSpectrum {
    pub size: usize,
    pub pitch: f64,
    spec: Vec<Complex64>,
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

impl ScreenSpectrum {
    pub fn draw(r0: f64, size: usize, pitch: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !size.is_power_of_two() || size < 2 {
            return invalid(format!("screen size must be a power of two, got {size}"));
        }
        if !(pitch > 0.0) {
            return invalid(format!("screen pitch must be positive, got {pitch}"));
        }
        if !(r0 > 0.0) {
            return invalid(format!("screen r0 must be positive, got {r0}"));
        }
        let df = 1.0 / (size as f64 * pitch);
        let amp = if r0.is_infinite() { 0.0 } else { (PSD_COEFF * r0.powf(-5.0 / 3.0)).sqrt() * df };
        let mut spec = Vec::with_capacity(size * size);
        for r in 0..size {
            let fy = signed_freq(r, size) * df;
            for c in 0..size {
                let fx = signed_freq(c, size) * df;
                let f = fx.hypot(fy);
                let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                let w = if f == 0.0 { 0.0 } else { amp * f.powf(-11.0 / 6.0) };
                spec.push(Complex64::new(a * w, b * w));
            }
        }
        Ok(Self { size, pitch, spec })
    }

    /// Both screens sampled at `x + shift` (metres, `[dx, dy]`).
    pub fn realize(&self, fft: &mut Fft2, shift: [f64; 2]) -> (Vec<f64>, Vec<f64>) {
        let n = self.size;
        let df = 1.0 / (n as f64 * self.pitch);
        let mut buf = self.spec.clone();
        if shift != [0.0, 0.0] {
            for r in 0..n {
                let fy = signed_freq(r, n) * df;
                for c in 0..n {
                    let fx = signed_freq(c, n) * df;
                    buf[r * n + c] *= Complex64::from_polar(1.0, 2.0 * PI * (fx * shift[0] + fy * shift[1]));
                }
            }
        }
        fft.inverse(&mut buf);
        (buf.iter().map(|z| z.re).collect(), buf.iter().map(|z| z.im).collect())
    }
}

/// One Kolmogorov screen by FFT filtering of white noise (DC bin zeroed).
pub fn make_screen(r0: f64, size: usize, pitch: f64, seed: u64) -> Result<PhaseScreen> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ScreenSpectrum::draw(r0, size, pitch, &mut rng)?;
    let (data, _) = spec.realize(&mut Fft2::new(size, size), [0.0, 0.0]);
    Ok(PhaseScreen { size, pitch, r0, z: 0.0, seed, data })
}

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub num_screens: usize,
    /// Aperture samples across the diameter at the observation plane.
    pub samples_across: usize,
    /// Propagation grid size; `None` picks the smallest power of two meeting the sampling constraints.
    pub grid: Option<usize>,
    /// Screens are drawn this many times larger than the grid and cropped, to keep more low-order power.
    pub screen_oversize: usize,
    pub absorber: bool,
    pub layout: ScreenLayout,
}

/// Where equal-strength screens sit along the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScreenLayout {
    /// `z / L = 1/M, 2/M, …, 1`: one Fresnel step per screen at the default geometry.
    Uniform,
    /// `z / L` evenly spaced over `(1/2, 1]`. Screens far from the aperture convert part of their
    /// high-order phase into amplitude over the remaining path, which the geometric Noll matrix ignores.
    NearHalf,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { num_screens: 5, samples_across: 32, grid: None, screen_oversize: 4, absorber: true, layout: ScreenLayout::NearHalf }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationPlan {
    pub n: usize,
    pub wavelength: f64,
    pub path_length: f64,
    pub aperture_d: f64,
    pub samples_across: usize,
    pub delta_src: f64,
    pub delta_obs: f64,
    /// Width of the illuminated patch at the aperture.
    pub droi: f64,
    /// Plane distances from the source, starting at 0 and ending at the path length.
    pub planes: Vec<f64>,
    /// Plane index of each screen.
    pub screen_planes: Vec<usize>,
    /// Aperture-referred Fried parameter of each screen (infinite for a vacuum path).
    pub screen_r0: Vec<f64>,
    pub screen_oversize: usize,
    pub absorber: bool,
}

impl PropagationPlan {
    /// Equal-strength screens placed by `opts.layout`.
    pub fn new(config: &OpticalConfig, opts: &PlanOptions) -> Result<Self> {
        let m = opts.num_screens;
        if m == 0 {
            return invalid("a propagation plan needs at least one screen");
        }
        let positions: Vec<f64> = match opts.layout {
            ScreenLayout::Uniform => (1..=m).map(|i| i as f64 / m as f64).collect(),
            ScreenLayout::NearHalf => (1..=m).map(|i| 0.5 + 0.5 * i as f64 / m as f64).collect(),
        };
        let r0 = config.r0() * (m as f64).powf(0.6);
        Self::with_screens(config, &positions, &vec![r0; m], opts)
    }

    /// Screens at fractional distances `positions` (from the source, in `(0, 1]`) with referred `r0s`.
    pub fn with_screens(config: &OpticalConfig, positions: &[f64], r0s: &[f64], opts: &PlanOptions) -> Result<Self> {
        config.validate()?;
        if positions.is_empty() || positions.len() != r0s.len() {
            return invalid("need one r0 per screen and at least one screen");
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) || positions[0] <= 0.0 || *positions.last().unwrap() > 1.0 {
            return invalid("screen positions must increase within (0, 1]");
        }
        if r0s.iter().any(|r| !(*r > 0.0)) {
            return invalid("screen r0 values must be positive");
        }
        if opts.samples_across < 8 || opts.screen_oversize == 0 {
            return invalid("need at least 8 aperture samples and a positive screen oversize");
        }
        let (lambda, l, d) = (config.wavelength_m, config.path_length_m, config.aperture_diameter_m);
        let delta_obs = d / opts.samples_across as f64;
        let r0 = composite_r0(r0s);
        let spread = if r0.is_finite() { 2.0 * lambda * l / r0 } else { 0.0 };
        let d2 = d + spread;
        let droi = 2.0 * d2;
        let delta_src = lambda * l / (2.0 * droi);
        let d1 = 16.0 * delta_src;
        let need = d1 / (2.0 * delta_src) + d2 / (2.0 * delta_obs) + lambda * l / (2.0 * delta_src * delta_obs);
        // The illuminated patch plus the absorber margin must also fit.
        let need = need.max(1.25 * droi / delta_obs);
        let suggested = (need.ceil() as usize).next_power_of_two().max(64);
        let n = match opts.grid {
            Some(g) if (g as f64) < need || !g.is_power_of_two() => {
                return invalid(format!("grid {g} violates the sampling constraints; use at least {suggested}"));
            }
            Some(g) => g,
            None => suggested,
        };
        if delta_obs > (lambda * l - d2 * delta_src) / d1 {
            return invalid("aperture sampling too coarse for the source geometry; raise samples_across");
        }
        let pitch = |z: f64| (1.0 - z / l) * delta_src + z / l * delta_obs;
        let mut planes = vec![0.0];
        let mut screen_planes = Vec::with_capacity(positions.len());
        for &p in positions {
            let target = p * l;
            // Split long steps so each stays below min(δ)² N / λ.
            loop {
                let z0 = *planes.last().unwrap();
                let max_step = pitch(z0).min(pitch(target)).powi(2) * n as f64 / lambda;
                if target - z0 <= max_step * (1.0 + 1e-12) {
                    break;
                }
                let steps = ((target - z0) / max_step).ceil();
                planes.push(z0 + (target - z0) / steps);
            }
            planes.push(target);
            screen_planes.push(planes.len() - 1);
        }
        if *planes.last().unwrap() < l {
            let z0 = *planes.last().unwrap();
            let max_step = pitch(z0).min(delta_obs).powi(2) * n as f64 / lambda;
            let steps = ((l - z0) / max_step).ceil().max(1.0) as usize;
            for s in 1..=steps {
                planes.push(z0 + (l - z0) * s as f64 / steps as f64);
            }
        }
        Ok(Self {
            n,
            wavelength: lambda,
            path_length: l,
            aperture_d: d,
            samples_across: opts.samples_across,
            delta_src,
            delta_obs,
            droi,
            planes,
            screen_planes,
            screen_r0: r0s.to_vec(),
            screen_oversize: opts.screen_oversize,
            absorber: opts.absorber,
        })
    }

    pub fn num_screens(&self) -> usize {
        self.screen_planes.len()
    }

    pub fn steps(&self) -> usize {
        self.planes.len() - 1
    }

    pub fn pitch(&self, plane: usize) -> f64 {
        let a = self.planes[plane] / self.path_length;
        (1.0 - a) * self.delta_src + a * self.delta_obs
    }

    /// `(Σ r0'^{-5/3})^{-3/5}` over the referred screen strengths.
    pub fn composite_r0(&self) -> f64 {
        composite_r0(&self.screen_r0)
    }

    /// Fried parameter of screen `i` in its own plane.
    pub fn physical_r0(&self, i: usize) -> f64 {
        self.screen_r0[i] * self.planes[self.screen_planes[i]] / self.path_length
    }

    pub fn screen_size(&self) -> usize {
        self.n * self.screen_oversize
    }

    /// Fresh screen spectra for every screen of the plan.
    pub fn draw_spectra(&self, rng: &mut ChaCha8Rng) -> Result<Vec<ScreenSpectrum>> {
        (0..self.num_screens())
            .map(|i| ScreenSpectrum::draw(self.physical_r0(i), self.screen_size(), self.pitch(self.screen_planes[i]), rng))
            .collect()
    }

    /// Central `n × n` crop of an oversized screen.
    pub fn crop(&self, screen: &[f64]) -> Vec<f64> {
        let (s, n) = (self.screen_size(), self.n);
        let o = (s - n) / 2;
        (0..n).flat_map(|r| screen[(o + r) * s + o..(o + r) * s + o + n].iter().copied()).collect()
    }
}

fn composite_r0(r0s: &[f64]) -> f64 {
    let s: f64 = r0s.iter().map(|r| r.powf(-5.0 / 3.0)).sum();
    if s == 0.0 {
        f64::INFINITY
    } else {
        s.powf(-0.6)
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Analytic vacuum intensity of the sinc-Gaussian source at aperture coordinates `(x, y)`.
pub fn vacuum_intensity(plan: &PropagationPlan, x: f64, y: f64) -> f64 {
    let ll = plan.wavelength * plan.path_length;
    let a = plan.droi / ll;
    let g = |f: f64| {
        let c = 4.0 * PI / a;
        (erf(c * (f + a / 2.0)) - erf(c * (f - a / 2.0))) / (2.0 * a)
    };
    (a * a * g(x / ll) * g(y / ll) / ll).powi(2)
}

/// Reusable stepping state for one plan: FFT plans, transfer functions and the absorber.
pub struct Propagator {
    pub plan: PropagationPlan,
    fft: Fft2,
    transfer: Vec<Vec<Complex64>>,
    mags: Vec<f64>,
    q3: Vec<Complex64>,
    absorber: Vec<f64>,
    /// Fresnel steps taken so far; each is one forward and one inverse 2D FFT.
    pub fft_steps: u64,
}

impl Propagator {
    pub fn new(plan: &PropagationPlan) -> Self {
        let n = plan.n;
        let k = 2.0 * PI / plan.wavelength;
        let steps = plan.steps();
        let mags: Vec<f64> = (0..steps).map(|i| plan.pitch(i + 1) / plan.pitch(i)).collect();
        let transfer = (0..steps)
            .map(|i| {
                let df = 1.0 / (n as f64 * plan.pitch(i));
                let dz = plan.planes[i + 1] - plan.planes[i];
                let mut t = Vec::with_capacity(n * n);
                for r in 0..n {
                    let fy = signed_freq(r, n) * df;
                    for c in 0..n {
                        let fx = signed_freq(c, n) * df;
                        t.push(Complex64::from_polar(1.0, -PI * PI * 2.0 * dz / (mags[i] * k) * (fx * fx + fy * fy)));
                    }
                }
                t
            })
            .collect();
        let (mlast, dzlast) = (mags[steps - 1], plan.planes[steps] - plan.planes[steps - 1]);
        let dn = plan.pitch(steps);
        let mut q3 = Vec::with_capacity(n * n);
        let mut absorber = Vec::with_capacity(n * n);
        let w = 0.47 * n as f64;
        for r in 0..n {
            let y = r as f64 - (n / 2) as f64;
            for c in 0..n {
                let x = c as f64 - (n / 2) as f64;
                let rsq = (x * x + y * y) * dn * dn;
                q3.push(Complex64::from_polar(1.0, k / 2.0 * (mlast - 1.0) / (mlast * dzlast) * rsq));
                absorber.push(if plan.absorber { (-((x * x + y * y) / (w * w)).powi(8)).exp() } else { 1.0 });
            }
        }
        Self { plan: plan.clone(), fft: Fft2::new(n, n), transfer, mags, q3, absorber, fft_steps: 0 }
    }

    /// Source field with the first-step curvature applied, centred at `source` (metres).
    fn source_field(&self, source: [f64; 2]) -> Vec<Complex64> {
        let p = &self.plan;
        let (n, d1) = (p.n, p.delta_src);
        let k = 2.0 * PI / p.wavelength;
        let l = p.path_length;
        let a = p.droi / (p.wavelength * l);
        let dz = p.planes[1] - p.planes[0];
        let q1 = k / 2.0 * (1.0 - self.mags[0]) / dz;
        let mut u = Vec::with_capacity(n * n);
        for r in 0..n {
            let y = (r as f64 - (n / 2) as f64) * d1;
            for c in 0..n {
                let x = (c as f64 - (n / 2) as f64) * d1;
                let (dx, dy) = (x - source[0], y - source[1]);
                let rs = dx * dx + dy * dy;
                let amp = a * a * sinc(a * dx) * sinc(a * dy) * (-(a / 4.0).powi(2) * rs).exp();
                u.push(Complex64::from_polar(amp, -k / (2.0 * l) * rs + q1 * (x * x + y * y)));
            }
        }
        u
    }

    /// Aperture-plane field for a point source at `source` through `screens` (each `n × n`, one per plan screen).
    pub fn propagate(&mut self, source: [f64; 2], screens: &[&[f64]]) -> Result<Vec<Complex64>> {
        let p = &self.plan;
        let n = p.n;
        if !screens.is_empty() && screens.len() != p.num_screens() {
            return invalid(format!("plan has {} screens, got {}", p.num_screens(), screens.len()));
        }
        if screens.iter().any(|s| s.len() != n * n) {
            return invalid(format!("screens must be {n} x {n}"));
        }
        if source[0].abs().max(source[1].abs()) > n as f64 * p.delta_src / 8.0 {
            return invalid("source offset leaves the sampled source region");
        }
        let mut u = self.source_field(source);
        let mut screen_at = vec![None; p.planes.len()];
        for (i, &pl) in p.screen_planes.iter().enumerate() {
            if let Some(s) = screens.get(i) {
                screen_at[pl] = Some(*s);
            }
        }
        for step in 0..p.steps() {
            let inv_m = 1.0 / self.mags[step];
            u.iter_mut().for_each(|z| *z *= inv_m);
            self.fft.forward(&mut u);
            let scale = 1.0 / (n * n) as f64;
            for (z, t) in u.iter_mut().zip(&self.transfer[step]) {
                *z *= t * scale;
            }
            self.fft.inverse(&mut u);
            self.fft_steps += 1;
            for (z, a) in u.iter_mut().zip(&self.absorber) {
                *z *= a;
            }
            if let Some(s) = screen_at[step + 1] {
                for (z, ph) in u.iter_mut().zip(s) {
                    *z *= Complex64::from_polar(1.0, *ph);
                }
            }
        }
        for (z, q) in u.iter_mut().zip(&self.q3) {
            *z *= q;
        }
        Ok(u)
    }
}

/// One-shot propagation; `screens` empty means vacuum.
pub fn propagate_point(plan: &PropagationPlan, source: [f64; 2], screens: &[&[f64]]) -> Result<Vec<Complex64>> {
    Propagator::new(plan).propagate(source, screens)
}

/// Least-squares phase unwrapping over the aperture disk and a Zernike fit of the result.
pub struct ApertureFit {
    pub n: usize,
    pub num_modes: usize,
    /// Grid indices of in-disk samples.
    pub pixels: Vec<usize>,
    edges: Vec<(usize, usize)>,
    laplacian: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pinv: DMatrix<f64>,
}

impl ApertureFit {
    pub fn new(plan: &PropagationPlan, num_modes: usize) -> Result<Self> {
        if num_modes < 3 {
            return invalid("need at least 3 modes");
        }
        let n = plan.n;
        let radius = plan.samples_across as f64 / 2.0;
        let mut index = vec![usize::MAX; n * n];
        let mut pixels = Vec::new();
        let mut coords = Vec::new();
        for r in 0..n {
            let y = (r as f64 - (n / 2) as f64) / radius;
            for c in 0..n {
                let x = (c as f64 - (n / 2) as f64) / radius;
                if x * x + y * y <= 1.0 {
                    index[r * n + c] = pixels.len();
                    pixels.push(r * n + c);
                    coords.push((x, y));
                }
            }
        }
        let mut edges = Vec::new();
        for (i, &p) in pixels.iter().enumerate() {
            for q in [p + 1, p + n] {
                if q < n * n && index[q] != usize::MAX && (q != p + 1 || q % n != 0) {
                    edges.push((i, index[q]));
                }
            }
        }
        let np = pixels.len();
        let mut lap = DMatrix::from_element(np, np, 1.0 / np as f64);
        for &(a, b) in &edges {
            lap[(a, a)] += 1.0;
            lap[(b, b)] += 1.0;
            lap[(a, b)] -= 1.0;
            lap[(b, a)] -= 1.0;
        }
        let laplacian = lap.cholesky().ok_or_else(|| Error::Numeric("disk Laplacian is singular".into()))?;
        let polys = (1..=num_modes).map(ZernikePolynomial::from_noll).collect::<Result<Vec<_>>>()?;
        let z = DMatrix::from_fn(np, num_modes, |i, j| polys[j].eval_xy(coords[i].0, coords[i].1));
        let gram = z.transpose() * &z;
        let inv = gram.try_inverse().ok_or_else(|| Error::Numeric("Zernike Gram matrix is singular".into()))?;
        Ok(Self { n, num_modes, pixels, edges, laplacian, pinv: inv * z.transpose() })
    }

    /// Unwrapped phase of `ratio` on the disk samples (zero mean), from wrapped neighbour differences.
    pub fn unwrap(&self, ratio: &[Complex64]) -> Vec<f64> {
        let mut b = DVector::zeros(self.pixels.len());
        for &(a, c) in &self.edges {
            let d = (ratio[self.pixels[c]] * ratio[self.pixels[a]].conj()).arg();
            b[c] += d;
            b[a] -= d;
        }
        self.laplacian.solve(&b).iter().copied().collect()
    }

    /// Noll coefficients of a disk phase; index 0 (piston) is set to zero.
    pub fn coefficients(&self, phase: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(phase);
        let mut a: Vec<f64> = (&self.pinv * v).iter().copied().collect();
        a[0] = 0.0;
        a
    }
}

/// Spatial tilt correlation between two sources whose screen footprints differ by `s` diameters along x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltSample {
    pub s: f64,
    /// Normalized `E[a2 a2']`.
    pub corr_x: f64,
    /// Normalized `E[a3 a3']`.
    pub corr_y: f64,
}

#[derive(Debug, Clone)]
pub struct SplitStepStats {
    pub num_modes: usize,
    pub trials: usize,
    /// Row-major `N × N` raw second moments `E[a_i a_j]`, index 0 is piston.
    pub covariance: Vec<f64>,
    pub mean: Vec<f64>,
    pub tilt: Vec<TiltSample>,
}

impl SplitStepStats {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.num_modes + j]
    }
}

/// Monte-Carlo Zernike statistics of aperture phases. Trials run in pairs that share one
/// complex screen spectrum per plane (real and imaginary parts). For each separation `s`
/// the second source sees every screen displaced by `s·D` in aperture-referred units.
pub fn splitstep_zernike_stats(
    plan: &PropagationPlan,
    num_modes: usize,
    n_trials: usize,
    separations: &[f64],
    seed: u64,
) -> Result<SplitStepStats> {
    if n_trials < 500 {
        return invalid(format!("need at least 500 trials, got {n_trials}"));
    }
    let fit = ApertureFit::new(plan, num_modes)?;
    let mut prop = Propagator::new(plan);
    let vac = prop.propagate([0.0, 0.0], &[])?;
    let mut sfft = Fft2::new(plan.screen_size(), plan.screen_size());
    let mut sums = vec![0.0; num_modes * num_modes];
    let mut mean = vec![0.0; num_modes];
    // Per separation: Σ a2 a2', Σ a3 a3', Σ a2'^2, Σ a3'^2, plus on-axis Σ a2^2, Σ a3^2 shared.
    let mut pair = vec![[0.0f64; 4]; separations.len()];
    let (mut v2, mut v3) = (0.0, 0.0);
    let coeffs_of = |prop: &mut Propagator, screens: &[Vec<f64>]| -> Result<Vec<f64>> {
        let refs: Vec<&[f64]> = screens.iter().map(|s| s.as_slice()).collect();
        let u = prop.propagate([0.0, 0.0], &refs)?;
        let ratio: Vec<Complex64> = u.iter().zip(&vac).map(|(a, b)| a * b.conj()).collect();
        Ok(fit.coefficients(&fit.unwrap(&ratio)))
    };
    let mut done = 0;
    let mut pair_index = 0u64;
    while done < n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pair_index);
        pair_index += 1;
        let spectra = plan.draw_spectra(&mut rng)?;
        let base: Vec<(Vec<f64>, Vec<f64>)> = spectra.iter().map(|s| s.realize(&mut sfft, [0.0, 0.0])).collect();
        let shifted: Vec<Vec<(Vec<f64>, Vec<f64>)>> = separations
            .iter()
            .map(|&s| {
                spectra
                    .iter()
                    .enumerate()
                    .map(|(i, sp)| {
                        let alpha = plan.planes[plan.screen_planes[i]] / plan.path_length;
                        sp.realize(&mut sfft, [s * plan.aperture_d * alpha, 0.0])
                    })
                    .collect()
            })
            .collect();
        for half in 0..2 {
            if done == n_trials {
                break;
            }
            let pick = |v: &[(Vec<f64>, Vec<f64>)]| -> Vec<Vec<f64>> {
                v.iter().map(|(a, b)| plan.crop(if half == 0 { a } else { b })).collect()
            };
            let a = coeffs_of(&mut prop, &pick(&base))?;
            for i in 0..num_modes {
                mean[i] += a[i];
                for j in 0..num_modes {
                    sums[i * num_modes + j] += a[i] * a[j];
                }
            }
            v2 += a[1] * a[1];
            v3 += a[2] * a[2];
            for (k, sh) in shifted.iter().enumerate() {
                let b = coeffs_of(&mut prop, &pick(sh))?;
                pair[k][0] += a[1] * b[1];
                pair[k][1] += a[2] * b[2];
                pair[k][2] += b[1] * b[1];
                pair[k][3] += b[2] * b[2];
            }
            done += 1;
        }
    }
    let t = n_trials as f64;
    let tilt = separations
        .iter()
        .zip(&pair)
        .map(|(&s, p)| TiltSample { s, corr_x: p[0] / (v2 * p[2]).sqrt(), corr_y: p[1] / (v3 * p[3]).sqrt() })
        .collect();
    Ok(SplitStepStats {
        num_modes,
        trials: n_trials,
        covariance: sums.iter().map(|v| v / t).collect(),
        mean: mean.iter().map(|v| v / t).collect(),
        tilt,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub points_w: usize,
    pub points_h: usize,
    pub screens: usize,
    pub seconds_per_frame: f64,
    pub seconds_per_point: f64,
    /// Fresnel steps (forward + inverse FFT pair) taken for the frame.
    pub fft_steps: u64,
}

/// Per-frame cost of a split-step frame: fresh screens, then one propagation and one
/// `K × K` PSF per point of a `w × h` grid. Each point sees the screens displaced by
/// its field angle (nearest screen pixel), as in anisoplanatic split-step imaging.
pub fn splitstep_benchmark(plan: &PropagationPlan, config: &OpticalConfig, grids: &[(usize, usize)], seed: u64) -> Result<Vec<BenchRow>> {
    let mut prop = Propagator::new(plan);
    let g = plan.samples_across;
    let mut synth = PsfSynth::with_params(g, config.psf_kernel_px, config.pad_factor(), 1)?;
    let mut psf = vec![0.0; config.psf_kernel_px * config.psf_kernel_px];
    let mut sfft = Fft2::new(plan.screen_size(), plan.screen_size());
    let (n, s) = (plan.n, plan.screen_size());
    let mut rows = Vec::new();
    for (gi, &(w, h)) in grids.iter().enumerate() {
        if w == 0 || h == 0 {
            return invalid("benchmark grids must be non-empty");
        }
        let start = Instant::now();
        let before = prop.fft_steps;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(gi as u64);
        let screens: Vec<Vec<f64>> = plan.draw_spectra(&mut rng)?.iter().map(|sp| sp.realize(&mut sfft, [0.0, 0.0]).0).collect();
        let mut crops = vec![vec![0.0; n * n]; screens.len()];
        let mut window = vec![Complex64::default(); g * g];
        for py in 0..h {
            for px in 0..w {
                let (sx, sy) = (px as f64 - (w / 2) as f64, py as f64 - (h / 2) as f64);
                for (i, sc) in screens.iter().enumerate() {
                    let alpha = plan.planes[plan.screen_planes[i]] / plan.path_length;
                    let step = config.pixel_s() * plan.aperture_d * alpha / plan.pitch(plan.screen_planes[i]);
                    let ox = ((s - n) / 2) as isize + (sx * step).round() as isize;
                    let oy = ((s - n) / 2) as isize + (sy * step).round() as isize;
                    for r in 0..n {
                        let rr = (oy + r as isize).rem_euclid(s as isize) as usize;
                        for c in 0..n {
                            crops[i][r * n + c] = sc[rr * s + (ox + c as isize).rem_euclid(s as isize) as usize];
                        }
                    }
                }
                let refs: Vec<&[f64]> = crops.iter().map(|c| c.as_slice()).collect();
                let u = prop.propagate([0.0, 0.0], &refs)?;
                for r in 0..g {
                    for c in 0..g {
                        window[r * g + c] = u[(n / 2 - g / 2 + r) * n + n / 2 - g / 2 + c];
                    }
                }
                synth.psf_from_field(&window, &mut psf)?;
            }
        }
        let secs = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            points_w: w,
            points_h: h,
            screens: plan.num_screens(),
            seconds_per_frame: secs,
            seconds_per_point: secs / (w * h) as f64,
            fft_steps: prop.fft_steps - before,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_partition_composes() {
        let config = OpticalConfig::default();
        for m in [1, 2, 5, 7] {
            let plan = PropagationPlan::new(&config, &PlanOptions { num_screens: m, ..PlanOptions::default() }).unwrap();
            assert!((plan.composite_r0() / config.r0() - 1.0).abs() < 1e-9);
            assert_eq!(plan.num_screens(), m);
            assert_eq!(*plan.planes.last().unwrap(), config.path_length_m);
        }
    }

    #[test]
    fn uniform_plan_needs_no_extra_planes() {
        let opts = PlanOptions { layout: ScreenLayout::Uniform, ..PlanOptions::default() };
        let plan = PropagationPlan::new(&OpticalConfig::default(), &opts).unwrap();
        assert_eq!(plan.n, 128);
        assert_eq!(plan.steps(), 5);
        let near = PropagationPlan::new(&OpticalConfig::default(), &PlanOptions::default()).unwrap();
        assert_eq!(near.screen_planes.len(), 5);
        assert!((near.planes[near.screen_planes[0]] - 600.0).abs() < 1e-9);
    }

    #[test]
    fn undersized_grid_is_rejected_with_a_suggestion() {
        let err = PropagationPlan::new(&OpticalConfig::default(), &PlanOptions { grid: Some(32), ..PlanOptions::default() })
            .unwrap_err()
            .to_string();
        assert!(err.contains("128"), "{err}");
    }

    #[test]
    fn screen_mean_is_zero_and_scales_with_r0() {
        let a = make_screen(0.1, 64, 0.01, 3).unwrap();
        let mean = a.data.iter().sum::<f64>() / a.data.len() as f64;
        assert!(mean.abs() < 1e-12);
        let b = make_screen(0.2, 64, 0.01, 3).unwrap();
        let ratio = 2f64.powf(-5.0 / 6.0);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((y - ratio * x).abs() < 1e-12);
        }
        assert_eq!(a, make_screen(0.1, 64, 0.01, 3).unwrap());
        assert!(make_screen(0.1, 48, 0.01, 3).is_err());
    }

    #[test]
    fn shifted_realization_is_a_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sp = ScreenSpectrum::draw(0.05, 32, 0.01, &mut rng).unwrap();
        let mut f = Fft2::new(32, 32);
        let (a, _) = sp.realize(&mut f, [0.0, 0.0]);
        let (b, _) = sp.realize(&mut f, [0.03, -0.01]);
        for r in 0..32 {
            for c in 0..32 {
                let src = ((r + 31) % 32) * 32 + (c + 3) % 32;
                assert!((b[r * 32 + c] - a[src]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn vacuum_step_is_unitary() {
        let config = OpticalConfig::default();
        let plan = PropagationPlan::new(&config, &PlanOptions { absorber: false, ..PlanOptions::default() }).unwrap();
        let mut prop = Propagator::new(&plan);
        let mut u = prop.source_field([0.0, 0.0]);
        for step in 0..plan.steps() {
            let e0: f64 = u.iter().map(|z| z.norm_sqr()).sum::<f64>() * plan.pitch(step).powi(2);
            let inv_m = 1.0 / prop.mags[step];
            u.iter_mut().for_each(|z| *z *= inv_m);
            prop.fft.forward(&mut u);
            let n2 = (plan.n * plan.n) as f64;
            for (z, t) in u.iter_mut().zip(&prop.transfer[step]) {
                *z *= t / n2;
            }
            prop.fft.inverse(&mut u);
            let e1: f64 = u.iter().map(|z| z.norm_sqr()).sum::<f64>() * plan.pitch(step + 1).powi(2);
            assert!((e1 / e0 - 1.0).abs() < 1e-6, "step {step}: {e0} -> {e1}");
        }
    }
}
