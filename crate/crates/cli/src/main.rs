use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use motion_refine::dynamics::NoiseConfig;
use motion_refine::synth::SynthConfig;
use motion_refine_cli::{cmd_calibrate, cmd_metrics, cmd_refine, cmd_refine_manifest, cmd_synth, EXIT_INPUT};

#[derive(Parser)]
#[command(name = "motion-refine", version, about = "Dynamics-guided refinement of human motion sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine one config, or every config listed in a manifest.
    Refine {
        #[arg(required_unless_present = "manifest", conflicts_with = "manifest")]
        config: Option<PathBuf>,
        /// JSON array of config paths.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 1, requires = "manifest")]
        jobs: usize,
    },
    /// Evaluate a predicted motion against ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        skeleton: PathBuf,
        #[arg(long, default_value = "metrics.json")]
        json: PathBuf,
    },
    /// Write a synthetic scenario and a matching refine config.
    Synth {
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frame count; 0 keeps the scenario default.
        #[arg(long, default_value_t = 0)]
        frames: usize,
        /// JSON file with prediction noise settings.
        #[arg(long)]
        noise: Option<PathBuf>,
    },
    /// Report the calibrated global scale for a config.
    Calibrate {
        config: PathBuf,
        /// Save the scaled initialization here.
        #[arg(long)]
        write: Option<PathBuf>,
    },
}

fn load_noise(path: &PathBuf) -> anyhow::Result<NoiseConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: invalid noise config: {e}", path.display()))
}

fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Refine { config, manifest, jobs } => match (config, manifest) {
            (_, Some(m)) => cmd_refine_manifest(&m, jobs),
            (Some(c), None) => cmd_refine(&c),
            (None, None) => EXIT_INPUT,
        },
        Command::Metrics {
            pred,
            gt,
            camera,
            skeleton,
            json,
        } => cmd_metrics(&pred, &gt, &camera, &skeleton, &json),
        Command::Synth {
            scenario,
            out,
            seed,
            frames,
            noise,
        } => {
            let mut cfg = SynthConfig {
                frames,
                seed,
                ..SynthConfig::default()
            };
            if let Some(p) = noise {
                match load_noise(&p) {
                    Ok(n) => cfg.noise = n,
                    Err(e) => {
                        eprintln!("error: {e:#}");
                        return EXIT_INPUT;
                    }
                }
            }
            cmd_synth(&scenario, &cfg, &out)
        }
        Command::Calibrate { config, write } => cmd_calibrate(&config, write.as_deref()),
    }
}

fn main() -> ExitCode {
    let code = run(Cli::parse());
    ExitCode::from(code as u8)
}
