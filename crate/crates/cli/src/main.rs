use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use vibefm::experiment::ExperimentConfig;
use vibefm::pipeline::{self, FINETUNE_CHECKPOINT, PRETRAIN_CHECKPOINT};
use vibefm::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

/// Multimodal contrastive pre-training and evaluation for vibration sensing.
#[derive(Parser)]
#[command(name = "vibefm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML, or JSON with a .json extension).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate SYNTH_A, SYNTH_B and the pretraining corpus.
    Synth(Common),
    /// Contrastive pretraining on the unlabeled corpus.
    Pretrain(Common),
    /// Supervised training from scratch on the train domain.
    Train {
        #[command(flatten)]
        common: Common,
        /// Fraction of the train split that keeps its labels.
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
    },
    /// Fine-tune the head of a pretrained or supervised checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Defaults to the experiment's pretrain.ckpt.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
    },
    /// Score a classifier on the test split of every test domain.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to the experiment's finetune.ckpt.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Run the evaluation grid and write its report.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Grid cells trained in parallel. Results do not depend on it.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        jobs: u64,
    },
    /// Re-render grid.md and the convergence plots from the CSV files.
    Report(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::Train { .. } => "train",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Grid { .. } => "grid",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth(c) | Command::Pretrain(c) | Command::Report(c) => c,
            Command::Train { common, .. }
            | Command::Finetune { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Grid { common, .. } => common,
        }
    }
}

enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: Error) -> Self {
        Failure::Runtime(format!("{} ({})", e, e.code()))
    }
}

fn check_ratio(ratio: f64) -> Result<(), Failure> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--ratio {ratio} must lie in (0, 1]")))
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config <PATH> is required".into()))?;
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} does not exist", path.display())));
    }
    ExperimentConfig::load(path, &common.overrides).map_err(|e| match e {
        Error::InvalidArgument(msg) => Failure::Usage(msg),
        Error::Io { .. } => Failure::Usage(e.to_string()),
        other => Failure::Config(other.to_string()),
    })
}

fn default_checkpoint(dir: &Path, given: &Option<PathBuf>, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| dir.join(name))
}

fn run(command: &Command) -> Result<(), Failure> {
    if let Command::Train { ratio, .. } | Command::Finetune { ratio, .. } = command {
        check_ratio(*ratio)?;
    }
    let config = load_config(command.common())?;
    let dir = config.output_dir();
    log::info!("{} -> {}", command.name(), dir.display());
    let files = match command {
        Command::Synth(_) => pipeline::synth(&config, &dir),
        Command::Pretrain(_) => pipeline::pretrain(&config, &dir),
        Command::Train { ratio, .. } => pipeline::train(&config, &dir, *ratio),
        Command::Finetune { checkpoint, ratio, .. } => {
            let ckpt = default_checkpoint(&dir, checkpoint, PRETRAIN_CHECKPOINT);
            pipeline::finetune(&config, &dir, &ckpt, *ratio)
        }
        Command::Evaluate { checkpoint, .. } => {
            let ckpt = default_checkpoint(&dir, checkpoint, FINETUNE_CHECKPOINT);
            pipeline::evaluate(&config, &dir, &ckpt).map(|(scores, files)| {
                for s in &scores {
                    println!("{}\taccuracy {:.4}\tmacro_f1 {:.4}\tn {}", s.domain, s.accuracy, s.macro_f1, s.samples);
                }
                files
            })
        }
        Command::Grid { jobs, .. } => pipeline::grid(&config, &dir, *jobs as usize).map(|(_, files)| files),
        Command::Report(_) => pipeline::report(&dir),
    }
    .map_err(Failure::runtime)?;
    let manifest = pipeline::record_manifest(&dir, &config, command.name(), &files).map_err(Failure::runtime)?;
    println!("{} files written to {} (config {})", files.len(), dir.display(), &manifest.config_hash[..12]);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = Cli::command();
            cmd.build();
            let sub = cmd.find_subcommand_mut(cli.command.name()).expect("known subcommand");
            eprintln!("{}", sub.render_usage());
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
