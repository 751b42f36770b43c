//! `anomsynth` command line.
//!
//! Exit codes: 0 on success, 2 on a configuration or usage error, 3 when a
//! pipeline stage fails. Errors are reported on stderr as one JSON object.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{CalibrationKind, RunConfig};
use pipeline::CliError;

#[derive(Parser, Debug)]
#[command(name = "anomsynth", version, about = "Defect synthesis and quality-weighted detector training")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file; flags win.
#[derive(Args, Debug)]
struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Softmax temperature for quality weights.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Hinge threshold for quality weights.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Weight calibration.
    #[arg(long, global = true, value_enum)]
    calibration: Option<CalibrationKind>,
    /// Directory holding every artifact.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write normal textures, a mask pool, the triplet manifest and the test set.
    GenCorpus,
    /// Fit the patch codebook on the normal images.
    TrainCodec,
    /// Fit the masked autoregressive token model.
    TrainAr,
    /// Produce one synthetic sample per triplet.
    Synth {
        /// Worker threads for batch edits.
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Score and weight the synthetic samples.
    Weigh,
    /// Train the detector on weighted synthetic samples and normals.
    TrainDetector {
        /// Ignore the quality weights (baseline).
        #[arg(long)]
        uniform_weights: bool,
    },
    /// Evaluate a trained detector on the held-out set.
    Eval {
        /// Evaluate the detector trained with --uniform-weights.
        #[arg(long)]
        uniform_weights: bool,
    },
    /// Time edits at increasing mask fractions.
    BenchMaskScaling,
    /// Train and evaluate once per softmax temperature.
    GammaScan {
        /// Comma-separated temperatures.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.5, 5.0])]
        gammas: Vec<f64>,
    },
    /// Print the effective config as JSON.
    ShowConfig,
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(g) = common.gamma {
        cfg.qaw.gamma = g;
    }
    if let Some(b) = common.beta {
        cfg.qaw.beta = b;
    }
    if let Some(c) = common.calibration {
        cfg.qaw.calibration = c;
    }
    if let Some(w) = &common.workdir {
        cfg.paths.workdir = w.clone();
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve(&cli.common)?;
    match &cli.command {
        Command::GenCorpus => pipeline::gen_corpus(&cfg),
        Command::TrainCodec => pipeline::train_codec(&cfg),
        Command::TrainAr => pipeline::train_ar(&cfg),
        Command::Synth { parallelism } => pipeline::synth(&cfg, *parallelism),
        Command::Weigh => pipeline::weigh(&cfg),
        Command::TrainDetector { uniform_weights } => pipeline::train_detector(&cfg, *uniform_weights),
        Command::Eval { uniform_weights } => pipeline::eval(&cfg, *uniform_weights),
        Command::BenchMaskScaling => pipeline::bench_mask_scaling(&cfg),
        Command::GammaScan { gammas } => pipeline::gamma_scan(&cfg, gammas),
        Command::ShowConfig => Ok(serde_json::to_string_pretty(&cfg).expect("serializable")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = e.print();
                return ExitCode::from(2);
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
