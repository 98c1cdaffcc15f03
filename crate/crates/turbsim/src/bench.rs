//! Field-generation timings for the dense-field sampler and the split-step reference.

use crate::config::RunConfig;
use anyhow::Result;
use serde::Serialize;
use std::fmt::Write as _;
use std::time::Instant;
use turbsim_core::correlation::{CorrelationSpec, KernelOptions};
use turbsim_core::fieldgen::{mix_fields, FieldSampler};
use turbsim_core::splitstep::{splitstep_benchmark, PlanOptions, PropagationPlan, ScreenLayout};

pub const MAX_FIELD_SIZE: usize = 4096;
pub const MAX_POINT_GRID: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    /// `df-p2s` or `split-step`.
    pub method: &'static str,
    pub width: usize,
    pub height: usize,
    pub seconds_per_frame: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of time against pixel count, when at least two field sizes ran.
    pub field_slope: Option<f64>,
    /// Log-log slope of time against point count for split-step.
    pub splitstep_slope: Option<f64>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,size,seconds_per_frame\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{}x{},{}", r.method, r.width, r.height, r.seconds_per_frame);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Square field sizes in pixels.
    pub field_sizes: Vec<usize>,
    /// Square split-step point grids.
    pub point_grids: Vec<usize>,
    pub frames: usize,
    pub screens: usize,
    pub seed: u64,
}

pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Mean per-frame time to draw and mix one coefficient field of `size × size`.
/// Kernel construction and sampler setup are excluded.
pub fn time_field_generation(config: &RunConfig, size: usize, frames: usize, seed: u64) -> Result<f64> {
    let o = config.resized(size, size).optics;
    let spec = CorrelationSpec::build_raw(o.num_modes, o.d_over_r0, size, size, o.pixel_s(), KernelOptions::default())?;
    let mut sampler = FieldSampler::new(&spec, size, size, seed)?;
    // One untimed frame warms the FFT plans and buffers.
    mix_fields(&sampler.sample(0), &spec.noll)?;
    let start = Instant::now();
    for k in 1..=frames as u64 {
        mix_fields(&sampler.sample(k), &spec.noll)?;
    }
    Ok(start.elapsed().as_secs_f64() / frames as f64)
}

pub fn cmd_bench(config: &RunConfig, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.field_sizes.is_empty() && opts.point_grids.is_empty() {
        anyhow::bail!("no benchmark sizes given");
    }
    if let Some(s) = opts.field_sizes.iter().find(|&&s| s == 0 || s > MAX_FIELD_SIZE) {
        anyhow::bail!("field size {s} outside 1..={MAX_FIELD_SIZE}");
    }
    if let Some(g) = opts.point_grids.iter().find(|&&g| g == 0 || g > MAX_POINT_GRID) {
        anyhow::bail!("point grid {g} outside 1..={MAX_POINT_GRID}");
    }
    let frames = opts.frames.max(1);
    let mut rows = Vec::new();
    for &size in &opts.field_sizes {
        let t = time_field_generation(config, size, frames, opts.seed)?;
        log::info!("df-p2s {size}x{size}: {t:.4} s/frame");
        rows.push(BenchRow { method: "df-p2s", width: size, height: size, seconds_per_frame: t });
    }
    if !opts.point_grids.is_empty() {
        let plan_opts = PlanOptions { num_screens: opts.screens, layout: ScreenLayout::Uniform, ..PlanOptions::default() };
        let plan = PropagationPlan::new(&config.optics, &plan_opts)?;
        let grids: Vec<(usize, usize)> = opts.point_grids.iter().map(|&g| (g, g)).collect();
        for r in splitstep_benchmark(&plan, &config.optics, &grids, opts.seed)? {
            log::info!("split-step {}x{} points: {:.4} s/frame", r.points_w, r.points_h, r.seconds_per_frame);
            rows.push(BenchRow {
                method: "split-step",
                width: r.points_w,
                height: r.points_h,
                seconds_per_frame: r.seconds_per_frame,
            });
        }
    }
    let slope = |method: &str| {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| ((r.width * r.height) as f64, r.seconds_per_frame))
            .collect();
        loglog_slope(&pts)
    };
    Ok(BenchReport { field_slope: slope("df-p2s"), splitstep_slope: slope("split-step"), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 4.0, 16.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.2))).collect();
        assert!((loglog_slope(&pts).unwrap() - 1.2).abs() < 1e-12);
        assert!(loglog_slope(&pts[..1]).is_none());
    }

    #[test]
    fn empty_and_oversized_requests_fail() {
        let cfg = RunConfig::default();
        let base = BenchOptions { field_sizes: vec![], point_grids: vec![], frames: 1, screens: 5, seed: 0 };
        assert!(cmd_bench(&cfg, &base).is_err());
        assert!(cmd_bench(&cfg, &BenchOptions { point_grids: vec![65], ..base.clone() }).is_err());
        assert!(cmd_bench(&cfg, &BenchOptions { field_sizes: vec![5000], ..base }).is_err());
    }
}
