//! Command-line entry point: run the full pipeline, batch-render a
//! composed scene, validate a persisted scene, or export the synthetic
//! test world.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coco4d::config::PipelineConfig;
use coco4d::error::CocoError;
use coco4d::pipeline::{
    export_mock_world, render_outputs, run, validate_scene, CameraSpec, TimeSpec,
};

const EXIT_INVALID_CONFIG: u8 = 2;
const EXIT_STAGE_FAILURE: u8 = 3;
const EXIT_VALIDATION_FAILURE: u8 = 4;

#[derive(Parser)]
#[command(name = "coco4d", about = "Desk-scale 4D scene generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline from a JSON config, resuming if interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a persisted scene for selected cameras and timestamps.
    Render {
        #[arg(long)]
        scene: PathBuf,
        /// "schedule", "orbit", or "elev,azim[;elev,azim...]".
        #[arg(long, default_value = "schedule")]
        cameras: String,
        /// "all" or comma-separated 1-based frame indices.
        #[arg(long, default_value = "all")]
        times: String,
        /// Output directory (defaults to SCENE/renders).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate every invariant of a persisted scene.
    Validate {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Export the deterministic synthetic world used by the test suite.
    MockWorld {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let cfg = match PipelineConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("invalid config: {e}");
                    return ExitCode::from(EXIT_INVALID_CONFIG);
                }
            };
            match run(&cfg, &out) {
                Ok(_) => {
                    println!("pipeline complete; scene at {}", out.join("scene").display());
                    ExitCode::SUCCESS
                }
                Err(e @ CocoError::InvalidConfig(_)) => {
                    eprintln!("invalid config: {e}");
                    ExitCode::from(EXIT_INVALID_CONFIG)
                }
                Err(e) => {
                    eprintln!("pipeline failed: {e}");
                    ExitCode::from(EXIT_STAGE_FAILURE)
                }
            }
        }
        Command::Render {
            scene,
            cameras,
            times,
            out,
        } => {
            let spec = match CameraSpec::parse(&cameras) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(EXIT_INVALID_CONFIG);
                }
            };
            let tspec = match TimeSpec::parse(&times) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(EXIT_INVALID_CONFIG);
                }
            };
            let out_dir = out.unwrap_or_else(|| scene.join("renders"));
            match render_outputs(&scene, &spec, &tspec, &out_dir) {
                Ok(report) => {
                    println!(
                        "rendered {} frames across {} cameras into {}",
                        report.frames_written,
                        report.cameras,
                        out_dir.display()
                    );
                    if let Some(psnrs) = report.reference_psnr {
                        let mean = psnrs.iter().sum::<f64>() / psnrs.len().max(1) as f64;
                        println!("reference-camera PSNR mean {mean:.2} dB");
                    }
                    ExitCode::SUCCESS
                }
                Err(e @ CocoError::InvalidArgument(_)) => {
                    eprintln!("{e}");
                    ExitCode::from(EXIT_INVALID_CONFIG)
                }
                Err(e) => {
                    eprintln!("render failed: {e}");
                    ExitCode::from(EXIT_STAGE_FAILURE)
                }
            }
        }
        Command::Validate { scene } => match validate_scene(&scene) {
            Ok(report) if report.is_ok() => {
                println!("scene valid");
                ExitCode::SUCCESS
            }
            Ok(report) => {
                for f in &report.failures {
                    eprintln!("FAIL {f}");
                }
                ExitCode::from(EXIT_VALIDATION_FAILURE)
            }
            Err(e) => {
                eprintln!("validation could not run: {e}");
                ExitCode::from(EXIT_VALIDATION_FAILURE)
            }
        },
        Command::MockWorld {
            seed,
            out,
            frames,
            resolution,
        } => match export_mock_world(seed, frames, resolution, &out) {
            Ok(()) => {
                println!("synthetic world written to {}", out.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("mock-world export failed: {e}");
                ExitCode::from(EXIT_STAGE_FAILURE)
            }
        },
    }
}
