//! Batch dataset generation.

use crate::config::RunConfig;
use crate::pipeline::{build_spec, obtain_basis, Pipeline};
use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use turbsim_core::psf::RenderMode;
use turbsim_core::raster::Raster;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    /// Paths are relative to the dataset directory.
    pub clean_image: String,
    pub sequence_dir: String,
    pub frames: u64,
    pub seed: u64,
    pub config_hash: String,
    pub frame_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub field_files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<String>,
    pub sequences: Vec<SequenceEntry>,
    #[serde(default)]
    pub errors: Vec<ErrorEntry>,
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub frames: u64,
    pub seed: u64,
    /// Worker threads; output does not depend on it.
    pub threads: usize,
}

/// Renders `frames` frames for every input image into `out_dir` and writes the manifest.
/// Sequence `i` uses seed `seed + i`. Per-file failures are recorded in the manifest.
pub fn cmd_generate(config: &RunConfig, inputs: &[PathBuf], out_dir: &Path, opts: &GenerateOptions) -> Result<DatasetManifest> {
    config.validate()?;
    if inputs.is_empty() {
        anyhow::bail!("no input images given");
    }
    if opts.frames == 0 {
        anyhow::bail!("frames must be at least 1");
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let spec = Arc::new(build_spec(config)?);
    let (basis, basis_file) = match config.output.render {
        RenderMode::P2s => {
            let b = obtain_basis(config, opts.seed)?;
            let name = "basis.tspb".to_string();
            b.save(&out_dir.join(&name))?;
            (Some(Arc::new(b)), Some(name))
        }
        RenderMode::Exact => (None, None),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.threads.max(1)).build()?;
    let results: Vec<std::result::Result<SequenceEntry, ErrorEntry>> = pool.install(|| {
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, input)| {
                let seed = opts.seed.wrapping_add(i as u64);
                run_sequence(config, &spec, basis.clone(), input, i, seed, opts.frames, out_dir).map_err(|e| ErrorEntry {
                    path: input.display().to_string(),
                    error: format!("{e:#}"),
                })
            })
            .collect()
    });
    let mut manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        config_hash: config.optics.hash(),
        basis: basis_file,
        sequences: Vec::new(),
        errors: Vec::new(),
    };
    for r in results {
        match r {
            Ok(s) => manifest.sequences.push(s),
            Err(e) => {
                log::error!("{}: {}", e.path, e.error);
                manifest.errors.push(e);
            }
        }
    }
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
fn run_sequence(
    config: &RunConfig,
    spec: &Arc<turbsim_core::correlation::CorrelationSpec>,
    basis: Option<Arc<turbsim_core::psf::PsfBasis>>,
    input: &Path,
    index: usize,
    seed: u64,
    frames: u64,
    out_dir: &Path,
) -> Result<SequenceEntry> {
    let source = Raster::load(input).with_context(|| format!("reading {}", input.display()))?;
    let dir_name = format!("seq_{index:04}");
    let dir = out_dir.join(&dir_name);
    std::fs::create_dir_all(&dir)?;
    let sixteen = config.output.png_16bit;
    let clean = format!("{dir_name}/clean.png");
    source.save(&out_dir.join(&clean), sixteen)?;
    let mut pipe = Pipeline::new(config.clone(), spec.clone(), basis, seed)?;
    let mut entry = SequenceEntry {
        clean_image: clean,
        sequence_dir: dir_name.clone(),
        frames,
        seed,
        config_hash: config.optics.hash(),
        frame_files: Vec::new(),
        field_files: Vec::new(),
    };
    for k in 0..frames {
        let (field, img, t) = pipe.step(&source)?;
        log::info!(
            "{dir_name} frame {k}: field {:.1} ms, weights {:.1} ms, render {:.1} ms",
            t.sample_ms,
            t.beta_ms,
            t.render_ms
        );
        let name = format!("{dir_name}/frame_{k:05}.png");
        img.save(&out_dir.join(&name), sixteen)?;
        entry.frame_files.push(name);
        if config.output.write_fields {
            let name = format!("{dir_name}/field_{k:05}.tszf");
            field.write_to(&out_dir.join(&name))?;
            entry.field_files.push(name);
        }
    }
    Ok(entry)
}
