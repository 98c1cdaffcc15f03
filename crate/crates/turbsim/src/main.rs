use anyhow::{Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use turbsim::bench::{cmd_bench, BenchOptions};
use turbsim::generate::{cmd_generate, GenerateOptions};
use turbsim::pipeline::obtain_basis;
use turbsim::validate::{run_suite, write_report, Suite, ValidateOptions};
use turbsim::RunConfig;

#[derive(Parser)]
#[command(name = "turbsim", version, about = "Dense-field atmospheric turbulence simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render turbulent sequences for a set of clean images.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        frames: u64,
        /// Worker threads (output is identical for any value).
        #[arg(long)]
        threads: Option<usize>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run a statistical validation suite; exits 1 if any check fails.
    Validate {
        suite: Suite,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for CSV artifacts and the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of sampled fields.
        #[arg(long)]
        fields: Option<usize>,
        /// Override the number of split-step trials.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Time field generation against split-step propagation.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square field sizes in pixels, e.g. 128,256,512.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Square split-step point grids, e.g. 8,16,32.
        #[arg(long, value_delimiter = ',')]
        points: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        frames: usize,
        #[arg(long, default_value_t = 5)]
        screens: usize,
        /// CSV output file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP/WebSocket API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Fit a PSF basis and write it as TSPB.
    FitBasis {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: &Option<PathBuf>) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { config, seed, out, frames, threads, inputs } => {
            let cfg = load(&config)?;
            let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let manifest = cmd_generate(&cfg, &inputs, &out, &GenerateOptions { frames, seed, threads })?;
            println!("{} sequences written to {}", manifest.sequences.len(), out.display());
            for e in &manifest.errors {
                eprintln!("error: {}: {}", e.path, e.error);
            }
            Ok(if manifest.errors.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Validate { suite, config, seed, out, fields, trials } => {
            let cfg = load(&config)?;
            let mut opts = ValidateOptions { seed, out_dir: out.clone(), ..ValidateOptions::default() };
            if let Some(f) = fields {
                opts.fields = f;
            }
            if let Some(t) = trials {
                opts.noll_trials = t;
            }
            let report = run_suite(suite, &cfg, &opts)?;
            for c in &report.checks {
                println!("{c}");
            }
            if let Some(dir) = &out {
                write_report(&report, dir)?;
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Bench { config, seed, sizes, points, frames, screens, out } => {
            if sizes.is_empty() && points.is_empty() {
                Cli::command()
                    .error(clap::error::ErrorKind::MissingRequiredArgument, "give --sizes and/or --points")
                    .exit();
            }
            let cfg = load(&config)?;
            let report = cmd_bench(&cfg, &BenchOptions { field_sizes: sizes, point_grids: points, frames, screens, seed })?;
            let csv = report.to_csv();
            match out {
                Some(p) => std::fs::write(&p, &csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
            if let Some(s) = report.field_slope {
                eprintln!("df-p2s log-log slope in pixel count: {s:.3}");
            }
            if let Some(s) = report.splitstep_slope {
                eprintln!("split-step log-log slope in point count: {s:.3}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { config, seed, port } => {
            let cfg = load(&config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(turbsim::service::serve(cfg, seed, port))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::FitBasis { config, seed, out } => {
            let mut cfg = load(&config)?;
            cfg.basis.path = None;
            let basis = obtain_basis(&cfg, seed)?;
            basis.save(&out)?;
            println!(
                "basis with {} kernels written to {} (residual energy {:.4})",
                basis.m(),
                out.display(),
                basis.residual_energy
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
