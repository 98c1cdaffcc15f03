//! Statistical validation suites with pass/fail thresholds and CSV artifacts.

use crate::config::RunConfig;
use anyhow::Result;
use clap::ValueEnum;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use turbsim_core::correlation::{energy_metrics, tensor_slices, CorrelationSpec, EnergySetup, KernelOptions};
use turbsim_core::fieldgen::dense::oracle_check;
use turbsim_core::fieldgen::{mix_fields, FieldSampler, ZernikeField};
use turbsim_core::noll::{noll_covariance, noll_entry};
use turbsim_core::optics::structure_function;
use turbsim_core::splitstep::{splitstep_zernike_stats, PlanOptions, PropagationPlan};
use turbsim_core::statval::{
    empirical_otf, empirical_structure_function, empirical_tilt_stats, theoretical_otf, theoretical_tilt_stats, OtfKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Structure,
    Otf,
    Tilt,
    Energy,
    Oracle,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Structure => "structure",
            Suite::Otf => "otf",
            Suite::Tilt => "tilt",
            Suite::Energy => "energy",
            Suite::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    /// CSV files written, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Sample counts and strengths. The defaults are the acceptance settings.
#[derive(Debug, Clone)]
pub struct ValidateOptions {
    pub seed: u64,
    pub fields: usize,
    pub strengths: Vec<f64>,
    /// Modes for the structure-function and OTF fields.
    pub modes: usize,
    pub tilt_strength: f64,
    pub noll_trials: usize,
    pub noll_strength: f64,
    pub noll_modes: usize,
    pub oracle_samples: usize,
    pub energy: EnergySetup,
    pub out_dir: Option<PathBuf>,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            fields: 500,
            strengths: vec![1.0, 2.0, 4.0],
            modes: 36,
            tilt_strength: 2.0,
            noll_trials: 1000,
            noll_strength: 2.0,
            noll_modes: 10,
            oracle_samples: 20_000,
            energy: EnergySetup::default(),
            out_dir: None,
        }
    }
}

/// Collects CSV artifacts; writes nothing without a directory.
pub struct Artifacts<'a> {
    dir: Option<&'a Path>,
    pub written: Vec<String>,
}

impl<'a> Artifacts<'a> {
    pub fn new(dir: Option<&'a Path>) -> Self {
        Self { dir, written: Vec::new() }
    }

    fn write(&mut self, name: String, text: &str) -> Result<()> {
        if let Some(dir) = self.dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(&name), text)?;
            self.written.push(name);
        }
        Ok(())
    }
}

fn kernel_opts() -> KernelOptions {
    KernelOptions::default()
}

/// One-diameter pixels on an 8 × 8 grid: every pixel is a nearly independent aperture.
fn sparse_spec(modes: usize, d: f64) -> Result<CorrelationSpec> {
    Ok(CorrelationSpec::build_raw(modes, d, 8, 8, 1.0, kernel_opts())?)
}

fn sample_fields(spec: &CorrelationSpec, size: usize, n: usize, seed: u64) -> Result<Vec<ZernikeField>> {
    let mut sampler = FieldSampler::new(spec, size, size, seed)?;
    (0..n as u64).map(|i| Ok(mix_fields(&sampler.sample(i), &spec.noll)?)).collect()
}

/// Aperture phases taken from each sparse 8 × 8 field.
const PHASES_PER_FIELD: usize = 4;

pub fn run_suite(suite: Suite, config: &RunConfig, opts: &ValidateOptions) -> Result<SuiteReport> {
    let mut art = Artifacts::new(opts.out_dir.as_deref());
    let checks = match suite {
        Suite::Structure => structure(opts, &mut art)?,
        Suite::Otf => otf(opts, &mut art)?,
        Suite::Tilt => tilt(opts, &mut art)?,
        Suite::Energy => energy(opts, &mut art)?,
        Suite::Oracle => {
            let mut checks = sampler_oracle(config, opts, &mut art)?;
            checks.extend(noll_vs_splitstep(config, opts, &mut art)?);
            checks
        }
    };
    Ok(SuiteReport { suite, checks, artifacts: art.written })
}

pub fn structure(opts: &ValidateOptions, art: &mut Artifacts) -> Result<Vec<Check>> {
    let base = sparse_spec(opts.modes, 1.0)?;
    let n = opts.fields;
    let mut checks = Vec::new();
    for &d in &opts.strengths {
        let spec = base.with_strength(d)?;
        let curve = empirical_structure_function(&sample_fields(&spec, 8, n, opts.seed)?, 64, PHASES_PER_FIELD)?;
        art.write(format!("structure_d{d}.csv"), &curve.to_csv(d, opts.seed))?;
        let (mut worst, mut at) = (0.0f64, 0.0);
        for (r, v) in curve.r.iter().zip(&curve.values) {
            let x = r * d;
            if (0.2..=1.0).contains(&x) {
                let dev = (v / structure_function(x, 1.0)? - 1.0).abs();
                if dev > worst {
                    (worst, at) = (dev, x);
                }
            }
        }
        checks.push(Check::new(
            format!("structure D/r0={d}"),
            worst <= 0.10 && curve.warnings.is_empty(),
            format!("max relative deviation {worst:.3} at r/r0 = {at:.3} ({} realizations)", curve.realizations),
        ));
    }
    Ok(checks)
}

pub fn otf(opts: &ValidateOptions, art: &mut Artifacts) -> Result<Vec<Check>> {
    let base = sparse_spec(opts.modes, 1.0)?;
    let n = opts.fields;
    let mut checks = Vec::new();
    for &d in &opts.strengths {
        let spec = base.with_strength(d)?;
        let fields = sample_fields(&spec, 8, n, opts.seed)?;
        let le = empirical_otf(OtfKind::Le, &fields, d, 64, PHASES_PER_FIELD)?;
        let se = empirical_otf(OtfKind::Se, &fields, d, 64, PHASES_PER_FIELD)?;
        for (curve, kind) in [(&le, OtfKind::Le), (&se, OtfKind::Se)] {
            let theory = theoretical_otf(kind, d, &curve.nu)?;
            let rms = curve.rms_deviation(&theory, 0.8);
            art.write(format!("otf_{}_d{d}.csv", curve.kind.name()), &curve.to_csv(opts.seed))?;
            art.write(format!("otf_{}_d{d}.csv", kind.name()), &theory.to_csv(opts.seed))?;
            checks.push(Check::new(format!("otf {} D/r0={d}", kind.name()), rms <= 0.05, format!("RMS {rms:.4} over nu <= 0.8")));
        }
        let gap = le.values.iter().zip(&se.values).map(|(l, s)| s - l).fold(f64::INFINITY, f64::min);
        checks.push(Check::new(format!("otf se>=le D/r0={d}"), gap >= 0.0, format!("min(SE - LE) = {gap:.2e}")));
    }
    Ok(checks)
}

pub fn tilt(opts: &ValidateOptions, art: &mut Artifacts) -> Result<Vec<Check>> {
    let d = opts.tilt_strength;
    let pitch = 10.0 / 31.0;
    let spec = CorrelationSpec::build_raw(3, d, 64, 64, pitch, kernel_opts())?;
    let fields = sample_fields(&spec, 64, opts.fields, opts.seed)?;
    let lags: Vec<usize> = (0..32).collect();
    let emp = empirical_tilt_stats(&fields, &lags, pitch, d)?.normalized();
    let th = theoretical_tilt_stats(&emp.s, 64.0, d)?;
    art.write("tilt_corr.csv".into(), &emp.corr_csv(opts.seed))?;
    art.write("tilt_dtv.csv".into(), &emp.dtv_csv(opts.seed))?;
    art.write("tilt_corr_theory.csv".into(), &th.corr_csv(opts.seed))?;
    art.write("tilt_dtv_theory.csv".into(), &th.dtv_csv(opts.seed))?;
    let worst = |e: &[f64], t: &[f64]| {
        (1..emp.s.len()).filter(|&k| emp.s[k] <= 10.0 + 1e-9).map(|k| (e[k] / t[k] - 1.0).abs()).fold(0.0, f64::max)
    };
    let wc = worst(&emp.corr, &th.corr);
    let wd = worst(&emp.dtv, &th.dtv);
    let mono = emp.corr.windows(2).all(|w| w[1] <= w[0]) && emp.dtv.windows(2).all(|w| w[1] >= w[0]);
    Ok(vec![
        Check::new("tilt correlation", wc <= 0.10 && emp.warnings.is_empty(), format!("max relative deviation {wc:.3} for s <= 10")),
        Check::new("differential tilt variance", wd <= 0.10, format!("max relative deviation {wd:.3} for s <= 10")),
        Check::new("tilt monotonicity", mono, "correlation non-increasing, DTV non-decreasing".to_string()),
    ])
}

pub fn energy(opts: &ValidateOptions, art: &mut Artifacts) -> Result<Vec<Check>> {
    let (full, approx) = tensor_slices(&opts.energy)?;
    let c = energy_metrics(&full, &approx)?;
    let mut csv = String::from("s,e,e_tilde,e_minus\n");
    for k in 0..c.s.len() {
        let _ = writeln!(csv, "{},{},{},{}", c.s[k], c.e[k], c.e_tilde[k], c.e_minus[k]);
    }
    art.write("energy.csv".into(), &csv)?;
    let at = |s: f64| {
        let k = c.s.iter().position(|&x| x >= s - 1e-9).unwrap_or(c.s.len() - 1);
        c.e_minus[k]
    };
    let s_max = *c.s.last().unwrap();
    let mut growth = 0.0f64;
    let mut s = 4.0;
    while s + 1.0 <= s_max + 1e-9 {
        let (a, b) = (at(s), at(s + 1.0));
        if a > 0.0 {
            growth = growth.max((b - a) / a);
        }
        s += 1.0;
    }
    let last = c.s.len() - 1;
    let ratio = c.e_minus[last] / c.e[last];
    Ok(vec![
        Check::new("energy E-(0) = 0", c.e_minus[0] == 0.0, format!("E-(0) = {:e}", c.e_minus[0])),
        Check::new("energy E- flat beyond s = 4", growth < 1e-3, format!("max growth {:.3}% per unit s", growth * 100.0)),
        Check::new(
            "energy ratio",
            ratio <= 1e-2,
            format!("E-/E = {ratio:.3e} at s = {s_max} (E {:.4e}, E~ {:.4e})", c.e[last], c.e_tilde[last]),
        ),
    ])
}

/// FFT sampler covariance against dense Cholesky draws on a 16 × 16, six-mode grid.
pub fn sampler_oracle(config: &RunConfig, opts: &ValidateOptions, art: &mut Artifacts) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let small = config.resized(16, 16).optics;
    let spec = CorrelationSpec::build_raw(6, small.d_over_r0, 16, 16, small.pixel_s(), kernel_opts())?;
    let rep = oracle_check(&spec, 16, 16, opts.oracle_samples, opts.seed)?;
    checks.push(Check::new(
        "sampler vs dense Cholesky",
        rep.sampler_vs_dense <= 0.05,
        format!(
            "Frobenius relative error {:.4} ({} samples; vs exact: sampler {:.4}, dense {:.4})",
            rep.sampler_vs_dense, rep.samples, rep.sampler_vs_exact, rep.dense_vs_exact
        ),
    ));
    art.write(
        "sampler_oracle.csv".into(),
        &format!(
            "samples,sampler_vs_dense,sampler_vs_exact,dense_vs_exact,effective_rank\n{},{},{},{},{}\n",
            rep.samples, rep.sampler_vs_dense, rep.sampler_vs_exact, rep.dense_vs_exact, rep.effective_rank
        ),
    )?;
    Ok(checks)
}

/// Analytic Noll matrix against Monte-Carlo projections of split-step aperture phases.
pub fn noll_vs_splitstep(config: &RunConfig, opts: &ValidateOptions, art: &mut Artifacts) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut optics = config.optics.clone();
    optics.d_over_r0 = opts.noll_strength;
    optics.cn2_m_neg2_3 = None;
    let plan = PropagationPlan::new(&optics, &PlanOptions::default())?;
    let n = opts.noll_modes;
    let stats = splitstep_zernike_stats(&plan, n, opts.noll_trials, &[], opts.seed)?;
    let noll = noll_covariance(n, opts.noll_strength)?;
    let mut csv = String::from("i,j,analytic,splitstep\n");
    let mut worst_diag = (0.0f64, 0);
    let mut worst_zero = (0.0f64, (0, 0));
    let t = stats.trials as f64;
    for i in 2..=n {
        for j in i..=n {
            let mc = stats.get(i - 1, j - 1);
            let an = noll.get(i - 1, j - 1);
            let _ = writeln!(csv, "{i},{j},{an},{mc}");
            if i == j {
                let dev = (mc / an - 1.0).abs();
                if dev > worst_diag.0 {
                    worst_diag = (dev, i);
                }
            } else if noll_entry(i, j)? == 0.0 {
                let sigma = ((stats.get(i - 1, i - 1) * stats.get(j - 1, j - 1) + mc * mc) / t).sqrt();
                let z = mc.abs() / sigma;
                if z > worst_zero.0 {
                    worst_zero = (z, (i, j));
                }
            }
        }
    }
    art.write("noll_splitstep.csv".into(), &csv)?;
    checks.push(Check::new(
        "Noll diagonal vs split-step",
        worst_diag.0 <= 0.10,
        format!("max relative deviation {:.3} at j = {} ({} trials)", worst_diag.0, worst_diag.1, stats.trials),
    ));
    checks.push(Check::new(
        "Noll zero pattern vs split-step",
        worst_zero.0 <= 3.0,
        format!("largest |entry| {:.2} sigma at ({}, {})", worst_zero.0, worst_zero.1 .0, worst_zero.1 .1),
    ));
    Ok(checks)
}

pub fn write_report(report: &SuiteReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{}_report.json", report.suite.name())), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}
