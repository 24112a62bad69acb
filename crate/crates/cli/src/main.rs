mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, EvaluateArgs, Target};
use config::RunConfigFile;
use tsr_core::config::Grid;
use tsr_core::synthetic::SyntheticSpec;

/// Traffic sign recognition with a large multimodal model.
#[derive(Debug, Parser)]
#[command(name = "tsr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(short, long, default_value = "tsr.toml")]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set recognition.use_context=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the planned number of model calls and stop.
    #[arg(long)]
    dry_run: bool,
    /// Worker threads (defaults to eval.jobs).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfigFile, CliError> {
        let mut cfg = RunConfigFile::load(&self.config, &self.overrides)?;
        if let Some(j) = self.jobs {
            cfg.eval.jobs = j.max(1);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut sign crops out of road images using their segmentation masks.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Continue past failing images (still exits non-zero).
        #[arg(long)]
        keep_going: bool,
    },
    /// Generate or resume the memory bank of sign descriptions.
    BuildBank {
        #[command(flatten)]
        common: Common,
        /// Stop after this many new entries.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Recognize a single sign and print the ranked answer and transcript.
    Recognize {
        #[command(flatten)]
        common: Common,
        /// Manifest entry to recognize.
        #[arg(long, conflicts_with = "crop", required_unless_present = "crop")]
        image_id: Option<String>,
        /// A sign crop image outside the manifest.
        #[arg(long)]
        crop: Option<PathBuf>,
    },
    /// Score the recognizer over the manifest, optionally across an ablation grid.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// strategies, context-generation or thinking-order.
        #[arg(long)]
        grid: Option<String>,
        /// Number of trials (defaults to eval.trials).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Write a small synthetic dataset with a scripted mock backend.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        per_class: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Extract { common, keep_going } => commands::extract(&common.load()?, keep_going, common.dry_run),
        Command::BuildBank { common, limit } => {
            let cfg = common.load()?;
            commands::build_bank(&cfg, cfg.eval.jobs, limit, common.dry_run)
        }
        Command::Recognize {
            common,
            image_id,
            crop,
        } => {
            let target = match (image_id, crop) {
                (Some(id), _) => Target::ImageId(id),
                (None, Some(p)) => Target::Crop(p),
                (None, None) => unreachable!("clap requires one of the two"),
            };
            commands::recognize(&common.load()?, &target, common.dry_run)
        }
        Command::Evaluate { common, grid, trials } => {
            let cfg = common.load()?;
            let grid = grid
                .map(|g| Grid::parse(&g).ok_or_else(|| CliError::Config(format!("unknown grid `{g}`"))))
                .transpose()?;
            let trials = trials.unwrap_or(cfg.eval.trials);
            if trials < 1 {
                return Err(CliError::Config("--trials must be >= 1".into()));
            }
            let args = EvaluateArgs {
                grid,
                trials,
                jobs: cfg.eval.jobs,
                dry_run: common.dry_run,
            };
            commands::evaluate(&cfg, &args)
        }
        Command::Synth {
            out,
            classes,
            per_class,
            seed,
        } => {
            let spec = SyntheticSpec {
                n_classes: classes,
                images_per_class: per_class,
                seed,
                ..SyntheticSpec::default()
            };
            commands::synth(&out, &spec).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
