use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use turbsim::config::TemporalConfig;
use turbsim::generate::{cmd_generate, DatasetManifest, GenerateOptions};
use turbsim::RunConfig;
use turbsim_core::fieldgen::ZernikeField;
use turbsim_core::psf::{render_exact, RenderMode};
use turbsim_core::raster::{natural_scene, Raster};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_turbsim"))
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default().resized(32, 32);
    cfg.optics.num_modes = 10;
    cfg.basis.samples = 200;
    cfg.basis.kernels = 8;
    cfg.temporal = TemporalConfig::Ar { alpha: 0.9 };
    cfg
}

fn write_inputs(dir: &Path, n: usize) -> Vec<PathBuf> {
    (0..n)
        .map(|i| {
            let p = dir.join(format!("clean_{i}.png"));
            natural_scene(32, 32, i as u64 + 1).save(&p, false).unwrap();
            p
        })
        .collect()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generate_is_deterministic_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let inputs = write_inputs(tmp.path(), 3);
    let cfg_path = tmp.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&small_config()).unwrap()).unwrap();
    let mut trees = Vec::new();
    for (run, threads) in [(0, 1), (1, 1), (2, 3)] {
        let out = tmp.path().join(format!("out{run}"));
        let status = bin()
            .args(["generate", "--seed", "7", "--frames", "2", "--threads", &threads.to_string()])
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .args(&inputs)
            .status()
            .unwrap();
        assert!(status.success());
        trees.push(tree(&out));
    }
    assert_eq!(trees[0], trees[1]);
    assert_eq!(trees[0], trees[2]);
    let manifest: DatasetManifest = serde_json::from_slice(&trees[0]["manifest.json"]).unwrap();
    assert_eq!(manifest.sequences.len(), 3);
    assert!(manifest.errors.is_empty());
    let seeds: Vec<u64> = manifest.sequences.iter().map(|s| s.seed).collect();
    assert_eq!(seeds, vec![7, 8, 9]);
    for s in &manifest.sequences {
        assert_eq!(s.frame_files.len(), 2);
        for f in s.frame_files.iter().chain([&s.clean_image]) {
            assert!(trees[0].contains_key(f), "{f} missing");
        }
    }
    assert!(trees[0].contains_key("basis.tspb"));
    // Different seeds give different frames.
    assert_ne!(trees[0]["seq_0000/frame_00000.png"], trees[0]["seq_0001/frame_00000.png"]);
}

#[test]
fn unreadable_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut inputs = write_inputs(tmp.path(), 1);
    inputs.push(tmp.path().join("missing.png"));
    let cfg_path = tmp.path().join("config.json");
    let mut cfg = small_config();
    cfg.output.render = RenderMode::Exact;
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = tmp.path().join("out");
    let status = bin().arg("generate").arg("--config").arg(&cfg_path).arg("--out").arg(&out).args(&inputs).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.sequences.len(), 1);
    assert_eq!(manifest.errors.len(), 1);
    assert!(manifest.errors[0].path.ends_with("missing.png"));
}

#[test]
fn turbulence_free_frame_is_the_diffraction_blurred_input() {
    let tmp = tempfile::tempdir().unwrap();
    let inputs = write_inputs(tmp.path(), 1);
    let mut cfg = small_config();
    cfg.optics.d_over_r0 = 0.0;
    cfg.output.render = RenderMode::Exact;
    cfg.output.png_16bit = true;
    let opts = GenerateOptions { frames: 1, seed: 3, threads: 1 };
    let m = cmd_generate(&cfg, &inputs, tmp.path(), &opts).unwrap();
    let got = Raster::load(&tmp.path().join(&m.sequences[0].frame_files[0])).unwrap();
    let src = Raster::load(&inputs[0]).unwrap();
    let want = render_exact(&src, &ZernikeField::zeros(32, 32, cfg.optics.num_modes), &cfg.optics).unwrap();
    for (a, b) in got.planes.iter().flatten().zip(want.planes.iter().flatten()) {
        assert!((a - b).abs() <= 1.0 / 65535.0, "{a} vs {b}");
    }
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let out = bin().args(["validate", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["bench"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.json");
    std::fs::write(&p, r#"{"optics": {"d_over_r": 2}}"#).unwrap();
    let out = bin().args(["validate", "structure", "--config"]).arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn validate_writes_artifacts_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["validate", "structure", "--fields", "150", "--out"]).arg(tmp.path()).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(matches!(out.status.code(), Some(0 | 1)));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 3, "{stdout}");
    let csv = std::fs::read_to_string(tmp.path().join("structure_d2.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# kind,d_over_r0,n_frames,seed"));
    assert_eq!(lines.next(), Some("# structure,2,600,0"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("structure_report.json")).unwrap()).unwrap();
    assert_eq!(report["checks"].as_array().unwrap().len(), 3);
    // The exit code follows the report.
    let all_pass = report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true);
    assert_eq!(out.status.success(), all_pass);
}

#[test]
fn bench_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bench.csv");
    let status = bin().args(["bench", "--sizes", "16,32", "--points", "2", "--frames", "1", "--out"]).arg(&csv).status().unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,size,seconds_per_frame");
    assert!(lines[1].starts_with("df-p2s,16x16,"));
    assert!(lines[3].starts_with("split-step,2x2,"));
}

#[test]
fn fit_basis_writes_a_loadable_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string(&small_config()).unwrap()).unwrap();
    let out = tmp.path().join("b.tspb");
    let status = bin().arg("fit-basis").arg("--config").arg(&cfg_path).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let b = turbsim_core::psf::PsfBasis::load(&out).unwrap();
    assert_eq!(b.m(), 8);
    b.check_config(&small_config().optics).unwrap();
}
