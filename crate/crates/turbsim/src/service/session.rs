//! One simulation session: a worker thread owning the sampler, fed by parameter
//! and source updates, publishing immutable frame snapshots.

use crate::config::RunConfig;
use crate::pipeline::{build_spec, ms, Pipeline, StageTimes};
use anyhow::{Context, Result};
use serde::Serialize;
use std::collections::{HashMap, VecDeque};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};
use tokio::sync::watch;
use turbsim_core::fieldgen::ZernikeField;
use turbsim_core::psf::{p2s_fit, PsfBasis, RenderMode};
use turbsim_core::raster::{natural_scene, Raster};
use turbsim_core::OpticalConfig;

/// Frame rate ceiling of the worker.
pub const MAX_FPS: f64 = 30.0;
/// How long a request keeps the worker producing frames.
pub const DEMAND_WINDOW: Duration = Duration::from_secs(2);
/// Relative strength change a fitted basis keeps serving.
pub const BASIS_REUSE: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct FrameSnapshot {
    /// Session-wide counter; does not restart when the geometry changes.
    pub index: u64,
    pub config_version: u64,
    pub source_version: u64,
    pub width: usize,
    pub height: usize,
    pub png: Arc<Vec<u8>>,
    pub field: Arc<ZernikeField>,
    pub optics: Arc<OpticalConfig>,
    pub times: StageTimes,
    pub encode_ms: f64,
    /// Rendered with a basis fitted too far from the current strength while a refit runs.
    pub stale_basis: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Status {
    pub refitting: bool,
    /// A geometry change is being prepared; frames still use the previous geometry.
    pub preparing: bool,
    pub fps: f64,
    pub frame_index: Option<u64>,
    pub config_version: u64,
    pub last_error: Option<String>,
}

struct Control {
    optics: OpticalConfig,
    config_version: u64,
    source: Option<Arc<Vec<u8>>>,
    source_version: u64,
    demand_until: Option<Instant>,
    shutdown: bool,
}

pub struct Shared {
    control: Mutex<Control>,
    wake: Condvar,
    pub frames: watch::Sender<Option<Arc<FrameSnapshot>>>,
    pub status: watch::Sender<Status>,
}

impl Shared {
    /// Keeps the worker producing frames for another [`DEMAND_WINDOW`].
    pub fn demand(&self) {
        let mut c = self.control.lock().unwrap();
        c.demand_until = Some(Instant::now() + DEMAND_WINDOW);
        self.wake.notify_all();
    }

    pub fn optics(&self) -> (OpticalConfig, u64) {
        let c = self.control.lock().unwrap();
        (c.optics.clone(), c.config_version)
    }

    pub fn versions(&self) -> (u64, u64) {
        let c = self.control.lock().unwrap();
        (c.config_version, c.source_version)
    }

    /// Installs a validated configuration; returns its version.
    pub fn set_optics(&self, optics: OpticalConfig) -> u64 {
        let mut c = self.control.lock().unwrap();
        if optics != c.optics {
            c.optics = optics;
            c.config_version += 1;
        }
        self.wake.notify_all();
        c.config_version
    }

    pub fn set_source(&self, png: Vec<u8>) -> u64 {
        let mut c = self.control.lock().unwrap();
        c.source = Some(Arc::new(png));
        c.source_version += 1;
        self.wake.notify_all();
        c.source_version
    }

    pub fn latest(&self) -> Option<Arc<FrameSnapshot>> {
        self.frames.borrow().clone()
    }
}

pub struct Session {
    pub id: String,
    pub shared: Arc<Shared>,
}

impl Session {
    pub fn start(id: String, config: RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shared = Arc::new(Shared {
            control: Mutex::new(Control {
                optics: config.optics.clone(),
                config_version: 1,
                source: None,
                source_version: 0,
                demand_until: None,
                shutdown: false,
            }),
            wake: Condvar::new(),
            frames: watch::channel(None).0,
            status: watch::channel(Status { config_version: 1, ..Status::default() }).0,
        });
        let worker_shared = shared.clone();
        std::thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || Worker::new(worker_shared, config, seed).run())
            .context("starting session worker")?;
        Ok(Self { id, shared })
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.shared.control.lock().unwrap().shutdown = true;
        self.shared.wake.notify_all();
    }
}

/// Optics with the strength cleared: configurations with the same key share kernels.
fn geometry_key(o: &OpticalConfig) -> String {
    let mut g = o.clone();
    g.d_over_r0 = 0.0;
    g.cn2_m_neg2_3 = None;
    g.hash()
}

fn reusable(basis_d: f64, d: f64) -> bool {
    (d - basis_d).abs() <= BASIS_REUSE * basis_d || d == basis_d
}

type BasisCache = Arc<Mutex<HashMap<String, Vec<Arc<PsfBasis>>>>>;

fn cached_basis(cache: &BasisCache, key: &str, d: f64) -> Option<Arc<PsfBasis>> {
    let map = cache.lock().unwrap();
    map.get(key)?
        .iter()
        .filter(|b| reusable(b.d_over_r0, d))
        .min_by(|a, b| (a.d_over_r0 - d).abs().total_cmp(&(b.d_over_r0 - d).abs()))
        .cloned()
}

fn fit_basis(config: &RunConfig, seed: u64) -> Result<PsfBasis> {
    if let Some(path) = &config.basis.path {
        if let Ok(b) = PsfBasis::load(path) {
            if b.check_config(&config.optics).is_ok() && reusable(b.d_over_r0, config.optics.d_over_r0) {
                return Ok(b);
            }
        }
    }
    let (basis, warnings) = p2s_fit(&config.optics, &config.basis.fit_options(seed))?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(basis)
}

/// Decodes `png` and resizes it to `width × height` if needed.
pub fn fit_source(png: &[u8], width: usize, height: usize) -> Result<Raster> {
    let img = image::load_from_memory(png).context("source is not a decodable image")?;
    if img.width() as usize == width && img.height() as usize == height {
        return Ok(Raster::from_png_bytes(png)?);
    }
    let (w, h) = (width as u32, height as u32);
    let filter = image::imageops::FilterType::Triangle;
    let resized = if img.color().has_color() {
        image::DynamicImage::ImageRgb16(image::imageops::resize(&img.to_rgb16(), w, h, filter))
    } else {
        image::DynamicImage::ImageLuma16(image::imageops::resize(&img.to_luma16(), w, h, filter))
    };
    let mut out = std::io::Cursor::new(Vec::new());
    resized.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(Raster::from_png_bytes(out.get_ref())?)
}

struct Active {
    pipeline: Pipeline,
    key: String,
    version: u64,
    source: Raster,
    source_version: u64,
}

enum Job {
    Prepared { key: String, result: Result<Pipeline> },
    Refit { key: String, d: f64, result: Result<PsfBasis> },
}

struct Worker {
    shared: Arc<Shared>,
    base: RunConfig,
    seed: u64,
    cache: BasisCache,
    active: Option<Active>,
    jobs_tx: mpsc::Sender<Job>,
    jobs_rx: mpsc::Receiver<Job>,
    preparing: Option<String>,
    refitting: Option<(String, f64)>,
    failed: Option<String>,
    counter: u64,
    produced: VecDeque<Instant>,
    last_error: Option<String>,
}

impl Worker {
    fn new(shared: Arc<Shared>, base: RunConfig, seed: u64) -> Self {
        let (jobs_tx, jobs_rx) = mpsc::channel();
        Self {
            shared,
            base,
            seed,
            cache: Arc::default(),
            active: None,
            jobs_tx,
            jobs_rx,
            preparing: None,
            refitting: None,
            failed: None,
            counter: 0,
            produced: VecDeque::new(),
            last_error: None,
        }
    }

    fn run(mut self) {
        let frame_gap = Duration::from_secs_f64(1.0 / MAX_FPS);
        let mut last_frame: Option<Instant> = None;
        loop {
            let (optics, version, source, source_version, wanted) = {
                let c = self.shared.control.lock().unwrap();
                if c.shutdown {
                    return;
                }
                let wanted = c.demand_until.is_some_and(|t| t > Instant::now());
                (c.optics.clone(), c.config_version, c.source.clone(), c.source_version, wanted)
            };
            while let Ok(job) = self.jobs_rx.try_recv() {
                self.finish_job(job);
            }
            if let Err(e) = self.reconcile(&optics, version, source.as_deref(), source_version) {
                self.fail(format!("{e:#}"));
            }
            self.publish_status(version);
            let due = last_frame.is_none_or(|t| t.elapsed() >= frame_gap);
            if wanted && due && self.active.is_some() {
                last_frame = Some(Instant::now());
                if let Err(e) = self.produce() {
                    self.fail(format!("{e:#}"));
                    std::thread::sleep(Duration::from_millis(100));
                }
                continue;
            }
            let wait = if wanted && self.active.is_some() {
                frame_gap.saturating_sub(last_frame.map_or(Duration::ZERO, |t| t.elapsed()))
            } else if self.preparing.is_some() || self.refitting.is_some() {
                Duration::from_millis(20)
            } else {
                Duration::from_millis(250)
            };
            let c = self.shared.control.lock().unwrap();
            let wanted_now = c.demand_until.is_some_and(|t| t > Instant::now());
            if !c.shutdown && c.config_version == version && c.source_version == source_version && wanted_now == wanted {
                let _ = self.shared.wake.wait_timeout(c, wait);
            }
        }
    }

    fn fail(&mut self, message: String) {
        log::error!("{message}");
        self.last_error = Some(message);
    }

    fn config_for(&self, optics: &OpticalConfig) -> RunConfig {
        RunConfig { optics: optics.clone(), ..self.base.clone() }
    }

    fn needs_basis(&self) -> bool {
        self.base.output.render == RenderMode::P2s
    }

    /// Brings the active pipeline in line with the requested configuration and source.
    fn reconcile(&mut self, optics: &OpticalConfig, version: u64, source: Option<&Vec<u8>>, source_version: u64) -> Result<()> {
        let key = geometry_key(optics);
        let same_geometry = self.active.as_ref().is_some_and(|a| a.key == key);
        if !same_geometry {
            if self.preparing.as_deref() != Some(key.as_str()) && self.failed.as_deref() != Some(key.as_str()) {
                self.prepare(optics, key);
            }
            return Ok(());
        }
        let needs_basis = self.needs_basis();
        let a = self.active.as_mut().unwrap();
        if a.version != version {
            if a.pipeline.config.optics.d_over_r0 != optics.d_over_r0 {
                a.pipeline.set_strength(optics.d_over_r0)?;
            }
            a.pipeline.config.optics = optics.clone();
            a.version = version;
        }
        if a.source_version != source_version || (a.source.width, a.source.height) != (optics.image_width_px, optics.image_height_px) {
            a.source = match source {
                Some(png) => fit_source(png, optics.image_width_px, optics.image_height_px)?,
                None => natural_scene(optics.image_width_px, optics.image_height_px, self.seed),
            };
            a.source_version = source_version;
        }
        if needs_basis {
            let d = optics.d_over_r0;
            let current = a.pipeline.basis.as_ref().map(|b| b.d_over_r0);
            if !current.is_some_and(|bd| reusable(bd, d)) {
                if let Some(b) = cached_basis(&self.cache, &key, d) {
                    a.pipeline.set_basis(b)?;
                } else if !self.refitting.as_ref().is_some_and(|(k, rd)| *k == key && reusable(*rd, d)) {
                    self.refit(optics, key);
                }
            }
        }
        Ok(())
    }

    fn prepare(&mut self, optics: &OpticalConfig, key: String) {
        log::info!("preparing geometry {key}");
        self.preparing = Some(key.clone());
        let config = self.config_for(optics);
        let (cache, seed, tx) = (self.cache.clone(), self.seed, self.jobs_tx.clone());
        let needs_basis = self.needs_basis();
        std::thread::spawn(move || {
            let result = (|| {
                let spec = Arc::new(build_spec(&config)?);
                let basis = if needs_basis {
                    let d = config.optics.d_over_r0;
                    Some(match cached_basis(&cache, &key, d) {
                        Some(b) => b,
                        None => {
                            let b = Arc::new(fit_basis(&config, seed)?);
                            cache.lock().unwrap().entry(key.clone()).or_default().push(b.clone());
                            b
                        }
                    })
                } else {
                    None
                };
                Pipeline::new(config, spec, basis, seed)
            })();
            let _ = tx.send(Job::Prepared { key, result });
        });
    }

    fn refit(&mut self, optics: &OpticalConfig, key: String) {
        let d = optics.d_over_r0;
        log::info!("refitting basis at D/r0 = {d}");
        self.refitting = Some((key.clone(), d));
        let config = self.config_for(optics);
        let (seed, tx) = (self.seed, self.jobs_tx.clone());
        std::thread::spawn(move || {
            let result = fit_basis(&config, seed);
            let _ = tx.send(Job::Refit { key, d, result });
        });
    }

    fn finish_job(&mut self, job: Job) {
        match job {
            Job::Prepared { key, result } => {
                if self.preparing.as_deref() == Some(key.as_str()) {
                    self.preparing = None;
                }
                match result {
                    Ok(pipeline) => {
                        // Version 0 and an empty source force reconcile to adopt the current request.
                        let source = Raster { width: 0, height: 0, planes: Vec::new() };
                        self.active = Some(Active { pipeline, key, version: 0, source, source_version: u64::MAX });
                        self.failed = None;
                    }
                    Err(e) => {
                        self.failed = Some(key);
                        self.fail(format!("preparing configuration failed: {e:#}"));
                    }
                }
            }
            Job::Refit { key, d, result } => {
                if self.refitting.as_ref().is_some_and(|(k, rd)| *k == key && *rd == d) {
                    self.refitting = None;
                }
                match result {
                    Ok(b) => {
                        let b = Arc::new(b);
                        self.cache.lock().unwrap().entry(key.clone()).or_default().push(b.clone());
                        if let Some(a) = self.active.as_mut() {
                            if a.key == key && reusable(d, a.pipeline.config.optics.d_over_r0) {
                                if let Err(e) = a.pipeline.set_basis(b) {
                                    self.fail(format!("{e:#}"));
                                }
                            }
                        }
                    }
                    Err(e) => self.fail(format!("basis refit failed: {e:#}")),
                }
            }
        }
    }

    fn produce(&mut self) -> Result<()> {
        let a = self.active.as_mut().context("no active pipeline")?;
        let (field, image, times) = a.pipeline.step(&a.source)?;
        let stale_basis = a.pipeline.basis.as_ref().is_some_and(|b| !reusable(b.d_over_r0, a.pipeline.config.optics.d_over_r0));
        let start = Instant::now();
        let png = image.to_png_bytes(false)?;
        let encode_ms = ms(start);
        self.counter += 1;
        let snap = FrameSnapshot {
            index: self.counter,
            config_version: a.version,
            source_version: a.source_version,
            width: image.width,
            height: image.height,
            png: Arc::new(png),
            field: Arc::new(field),
            optics: Arc::new(a.pipeline.config.optics.clone()),
            times,
            encode_ms,
            stale_basis,
        };
        self.shared.frames.send_replace(Some(Arc::new(snap)));
        let now = Instant::now();
        self.produced.push_back(now);
        while self.produced.front().is_some_and(|t| now.duration_since(*t) > Duration::from_secs(2)) {
            self.produced.pop_front();
        }
        Ok(())
    }

    fn fps(&self) -> f64 {
        match (self.produced.front(), self.produced.back()) {
            (Some(a), Some(b)) if self.produced.len() > 1 && b > a => {
                (self.produced.len() - 1) as f64 / b.duration_since(*a).as_secs_f64()
            }
            _ => 0.0,
        }
    }

    fn publish_status(&self, version: u64) {
        let fps = if self.produced.back().is_some_and(|t| t.elapsed() < Duration::from_secs(2)) { self.fps() } else { 0.0 };
        let status = Status {
            refitting: self.refitting.is_some(),
            preparing: self.preparing.is_some(),
            // Coarse rounding keeps status subscribers from waking on every frame.
            fps: (fps * 2.0).round() / 2.0,
            frame_index: (self.counter > 0).then_some(self.counter),
            config_version: version,
            last_error: self.last_error.clone(),
        };
        self.shared.status.send_if_modified(|s| {
            if *s != status {
                *s = status;
                true
            } else {
                false
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_reuse_window() {
        assert!(reusable(2.0, 2.5));
        assert!(reusable(2.0, 1.5));
        assert!(!reusable(2.0, 2.6));
        assert!(reusable(0.0, 0.0));
        assert!(!reusable(0.0, 0.1));
    }

    #[test]
    fn geometry_key_ignores_strength() {
        let a = OpticalConfig::default();
        let b = OpticalConfig { d_over_r0: 3.0, ..a.clone() };
        let c = OpticalConfig { image_width_px: 128, ..a.clone() };
        assert_eq!(geometry_key(&a), geometry_key(&b));
        assert_ne!(geometry_key(&a), geometry_key(&c));
    }

    #[test]
    fn sources_are_resized() {
        let r = natural_scene(20, 10, 1);
        let png = r.to_png_bytes(false).unwrap();
        let same = fit_source(&png, 20, 10).unwrap();
        assert_eq!((same.width, same.height), (20, 10));
        let small = fit_source(&png, 8, 6).unwrap();
        assert_eq!((small.width, small.height, small.channels()), (8, 6, r.channels()));
        assert!(fit_source(b"not a png", 8, 8).is_err());
    }
}
