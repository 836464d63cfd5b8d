//! `fer`: data generation, preprocessing, training, evaluation and
//! self-training from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fer_core::config::RunConfig;
use fer_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "fer",
    version,
    about = "Video emotion recognition with three-level attention and noisy-student self-training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Run directory for every output of the command.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic labelled, validation and unlabelled manifests.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Crop face, eyes and mouth from frame images into a manifest.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Landmark stream, one record per frame.
        #[arg(long)]
        landmarks: PathBuf,
        /// Directory of frame images (PNG or PNM), read in file-name order.
        #[arg(long)]
        frames: PathBuf,
        /// Video id used for manifest entries.
        #[arg(long)]
        id: String,
        /// Emotion label, or UNLABELLED to cut validated clips.
        #[arg(long, default_value = "UNLABELLED")]
        label: String,
    },
    /// Supervised training on a labelled manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        labelled: PathBuf,
        /// Validation manifest; the training set is used when absent.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Shorthand for `--set epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint and write per-video attention diagnostics.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Pseudo-label an unlabelled manifest and balance the result.
    PseudoLabel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        unlabelled: PathBuf,
        /// Labelled manifest whose class distribution is the balance target.
        #[arg(long)]
        labelled: PathBuf,
    },
    /// Teacher–student self-training over several generations.
    Selftrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        labelled: PathBuf,
        #[arg(long)]
        unlabelled: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Shorthand for `--set generations=N`.
        #[arg(long)]
        generations: Option<usize>,
        /// Saturation tolerance, or `none` to run every generation.
        #[arg(long = "sat-eps")]
        sat_eps: Option<String>,
        /// Start from this teacher checkpoint instead of training one.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Summarise a run directory, or run the component ablation ladder.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory to summarise.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Train every rung of the ablation ladder.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        labelled: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// With --ablation, append self-training generations.
        #[arg(long)]
        unlabelled: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// Gradient check over tolerance.
    Numeric(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 3,
            CliError::Core(e) => match e {
                Error::Usage(_) | Error::Config(_) => 1,
                e if e.is_numeric() => 3,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn load_config(args: &ConfigArgs, extra: &[String]) -> CliResult<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides: Vec<&String> = args.set.iter().chain(extra).collect();
    Ok(base.with_overrides(&overrides)?)
}

fn run(cli: Cli) -> CliResult<()> {
    use commands::*;
    match cli.command {
        Command::GenData { cfg, out } => gen_data(&cfg, &out),
        Command::Preprocess {
            cfg,
            out,
            landmarks,
            frames,
            id,
            label,
        } => preprocess(&cfg, &out, &landmarks, &frames, &id, &label),
        Command::Train {
            cfg,
            out,
            labelled,
            val,
            epochs,
        } => {
            let extra: Vec<String> = epochs.map(|e| format!("epochs={e}")).into_iter().collect();
            train(&cfg, &extra, &out, &labelled, val.as_deref())
        }
        Command::Eval {
            cfg,
            out,
            model,
            data,
        } => eval(&cfg, &out, &model, &data),
        Command::PseudoLabel {
            cfg,
            out,
            model,
            unlabelled,
            labelled,
        } => pseudo_label(&cfg, &out, &model, &unlabelled, &labelled),
        Command::Selftrain {
            cfg,
            out,
            labelled,
            unlabelled,
            val,
            generations,
            sat_eps,
            teacher,
        } => {
            let mut extra: Vec<String> = generations
                .map(|g| format!("generations={g}"))
                .into_iter()
                .collect();
            if let Some(s) = sat_eps {
                extra.push(format!("saturation_eps={s}"));
            }
            selftrain(
                &cfg,
                &extra,
                &out,
                &labelled,
                &unlabelled,
                val.as_deref(),
                teacher.as_deref(),
            )
        }
        Command::Gradcheck {
            cfg,
            out,
            force,
            tolerance,
        } => gradcheck(&cfg, out.as_deref(), force, tolerance),
        Command::Report {
            cfg,
            run,
            ablation,
            labelled,
            val,
            unlabelled,
            out,
            force,
        } => {
            if ablation {
                let labelled = labelled
                    .ok_or_else(|| CliError::Usage("report --ablation needs --labelled".into()))?;
                let out =
                    out.ok_or_else(|| CliError::Usage("report --ablation needs --out".into()))?;
                ablation_report(
                    &cfg,
                    &OutArgs { out, force },
                    &labelled,
                    val.as_deref(),
                    unlabelled.as_deref(),
                )
            } else {
                let run =
                    run.ok_or_else(|| CliError::Usage("report needs --run or --ablation".into()))?;
                summarise(&run)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
