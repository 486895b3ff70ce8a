use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pilight_cli::commands;
use pilight_cli::commands::relight::RelightArgs;
use pilight_cli::{init_thread_pool, CliError, RunConfig};

/// Physics-inspired relighting toolkit: dataset generation, two-stage
/// diffusion training, relighting, evaluation and ablations.
#[derive(Parser)]
#[command(name = "pilight", version, disable_help_subcommand = true)]
struct Cli {
    /// Configuration file (JSON or TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural dataset.
    Gen {
        /// Number of training scenes.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train a stage (1: intrinsics, 2: relighting).
    Train {
        #[arg(long)]
        stage: u8,
        /// Optimizer steps override for the chosen stage.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Relight an input image under a gray-ball condition.
    Relight {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ball: PathBuf,
        /// Directory with albedo.png / normal.pfm / roughness.png /
        /// metallic.png / mask.png; stage 1 predicts them when omitted.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        /// Guidance scale override.
        #[arg(long)]
        cfg: Option<f64>,
    },
    /// Evaluate checkpoints on a dataset split.
    Eval {
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and compare the loss/decomposition ablation variants.
    Ablate {
        /// Steps per variant override.
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Gen { scenes } => {
            if let Some(s) = scenes {
                cfg.gen.scenes = *s;
            }
            commands::gen::run(&cfg)
        }
        Command::Train { stage, steps } => {
            if let Some(s) = steps {
                match stage {
                    1 => cfg.train.steps_stage1 = *s,
                    _ => cfg.train.steps_stage2 = *s,
                }
            }
            commands::train::run(&cfg, *stage)
        }
        Command::Relight { input, ball, intrinsics, cfg: cfg_scale } => commands::relight::run(
            &cfg,
            &RelightArgs {
                input,
                ball,
                intrinsics: intrinsics.as_deref(),
                cfg_scale: *cfg_scale,
            },
        ),
        Command::Eval { split } => {
            if let Some(s) = split {
                cfg.eval.split = s.clone();
            }
            commands::eval::run(&cfg)
        }
        Command::Ablate { steps } => {
            if let Some(s) = steps {
                cfg.ablate.steps = *s;
            }
            commands::ablate::run(&cfg).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not usage errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
