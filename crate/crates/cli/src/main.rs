//! Command-line entry points for dataset curation, training, sampling, and
//! evaluation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 training divergence,
//! 4 empty input. All logs go to stderr; artifacts go to the configured
//! output directories only.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glyphdraw::error::Error;
use glyphdraw::glyph_assets::QuadRegion;

use commands::{EvaluateArgs, SampleArgs, TrainMode};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "glyphdraw", about = "Text-in-image diffusion toolkit", version)]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true, default_value = "glyphdraw.json")]
    config: PathBuf,
    /// Override the run seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the training corpus shard.
    BuildDataset {
        /// Override the sample count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the base or glyph-conditioned model.
    Train {
        /// "base" or "glyphdraw".
        #[arg(long, default_value = "glyphdraw")]
        mode: String,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
        /// Override the training step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the per-pixel mask predictor on a frozen glyphdraw checkpoint.
    TrainMaskPredictor,
    /// Generate images.
    Sample(SampleCli),
    /// Judge generated images or run the spelling benchmark.
    Evaluate(EvaluateCli),
}

#[derive(Args)]
struct SampleCli {
    #[arg(long)]
    prompt: String,
    /// Text to render; empty forces the all-ones mask path.
    #[arg(long, default_value = "")]
    text: String,
    /// User quad "x0,y0,x1,y1" (axis-aligned) for the text location.
    #[arg(long, conflicts_with_all = ["random_mask", "predicted_mask"])]
    quad: Option<String>,
    /// Place the text inside a random quad.
    #[arg(long, conflicts_with = "predicted_mask")]
    random_mask: bool,
    /// Estimate the mask with the trained predictor.
    #[arg(long)]
    predicted_mask: bool,
    /// Override the hybrid ratio.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args)]
struct EvaluateCli {
    /// Judge an existing directory of PNGs with sidecar JSONs.
    #[arg(long, conflicts_with = "generate_from_benchmark")]
    images_dir: Option<PathBuf>,
    /// Generate fresh images from the spelling benchmark and judge them.
    #[arg(long)]
    generate_from_benchmark: bool,
    /// Comma-separated r values to sweep, e.g. "0,0.5,1.0".
    #[arg(long)]
    r_sweep: Option<String>,
}

fn parse_quad(s: &str) -> Result<QuadRegion, Error> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad --quad value {s:?}: {e}")))?;
    if parts.len() != 4 {
        return Err(Error::Config("--quad wants x0,y0,x1,y1".into()));
    }
    Ok(QuadRegion::axis_aligned(parts[0], parts[1], parts[2], parts[3]))
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::BuildDataset { count } => {
            if let Some(c) = count {
                cfg.dataset.count = c;
            }
            cfg.validate()?;
            commands::cmd_build_dataset(&cfg)
        }
        Command::Train { mode, resume, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            let mode = match mode.as_str() {
                "base" => TrainMode::Base,
                "glyphdraw" => TrainMode::GlyphDraw,
                other => return Err(Error::Config(format!("unknown train mode {other:?}"))),
            };
            commands::cmd_train(&cfg, mode, resume)
        }
        Command::TrainMaskPredictor => commands::cmd_train_mask_predictor(&cfg),
        Command::Sample(s) => {
            let quad = s.quad.as_deref().map(parse_quad).transpose()?;
            commands::cmd_sample(
                &cfg,
                &SampleArgs {
                    prompt: s.prompt,
                    text: s.text,
                    quad,
                    random_mask: s.random_mask,
                    predicted_mask: s.predicted_mask,
                    r: s.r,
                    count: s.count,
                },
            )
        }
        Command::Evaluate(e) => {
            let r_sweep = match e.r_sweep.as_deref() {
                Some(s) => s
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<f64>()
                            .map_err(|err| Error::Config(format!("bad --r-sweep: {err}")))
                    })
                    .collect::<Result<Vec<f64>, Error>>()?,
                None => Vec::new(),
            };
            commands::cmd_evaluate(
                &cfg,
                &EvaluateArgs {
                    images_dir: e.images_dir,
                    generate_from_benchmark: e.generate_from_benchmark,
                    r_sweep,
                },
            )
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Divergence { .. } => 3,
        Error::EmptyReport => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
