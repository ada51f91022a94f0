//! Command-line interface: synthetic data, training, evaluation,
//! prediction and gradient checking.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 3 on
//! numeric failures (non-finite values, gradient-check violations).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::MetricKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] softpose::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "softpose", version, about = "Soft-argmax pose regression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Named starting configuration: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    /// TOML file with [model], [train], [synth], [crop] and [eval] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of colored-blob skeletons.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; receives annotations.jsonl and images/.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Index of the first sample (samples depend only on seed and index).
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on an annotation file.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training annotations.
        #[arg(long)]
        data: PathBuf,
        /// Validation annotations; by default a fraction of --data is held out.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory for checkpoints and the run log.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Stop once validation PCK reaches this fraction.
        #[arg(long)]
        target_pck: Option<f64>,
        /// Start from the weights of this checkpoint with a fresh optimizer.
        #[arg(long, conflicts_with = "resume")]
        init_from: Option<PathBuf>,
        /// Continue a run from this checkpoint, optimizer state included.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print a metric table for predictions against annotations.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Ground-truth annotations.
        #[arg(long)]
        data: PathBuf,
        /// Predicted poses, one JSON pose per line in annotation order.
        #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Predict with this checkpoint instead of reading predictions.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Option<MetricKind>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict poses and write overlays and heat-map mosaics.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single PNG image; the whole image is used unless --center/--scale are given.
        #[arg(long, required_unless_present = "data", conflicts_with = "data")]
        image: Option<PathBuf>,
        /// Crop center in pixels, as two values: x y.
        #[arg(long, value_delimiter = ',', num_args = 2, requires = "image")]
        center: Option<Vec<f64>>,
        /// Crop scale (side = scale × pixels_per_scale).
        #[arg(long, requires = "image")]
        scale: Option<f64>,
        /// Annotation file whose samples are all predicted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Enlargement of overlays and mosaics.
        #[arg(long, default_value_t = 4)]
        zoom: usize,
        /// Number of samples that get images written.
        #[arg(long, default_value_t = 16)]
        max_images: usize,
    },
    /// Compare analytic gradients with finite differences for every operation.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            cfg,
            out,
            count,
            start,
            seed,
        } => commands::synth(&cfg.load()?, &out, start, count, seed),
        Command::Train {
            cfg,
            data,
            val,
            out,
            epochs,
            seed,
            lr,
            batch_size,
            target_pck,
            init_from,
            resume,
        } => {
            let mut run = cfg.load()?;
            let t = &mut run.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.seed = seed.unwrap_or(t.seed);
            t.initial_lr = lr.unwrap_or(t.initial_lr);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.target_pck = target_pck.or(t.target_pck);
            if out.is_some() {
                t.output_dir = out;
            }
            t.validate()?;
            commands::train(&run, &data, val.as_deref(), init_from.as_deref(), resume.as_deref())
        }
        Command::Eval {
            cfg,
            data,
            predictions,
            checkpoint,
            metric,
            threshold,
            out,
        } => commands::eval(
            &cfg.load()?,
            &data,
            predictions.as_deref(),
            checkpoint.as_deref(),
            metric,
            threshold,
            out.as_deref(),
        ),
        Command::Predict {
            cfg,
            checkpoint,
            image,
            center,
            scale,
            data,
            out,
            zoom,
            max_images,
        } => {
            let center = center.map(|c| [c[0], c[1]]);
            let source = match (image, data) {
                (Some(path), _) => commands::PredictSource::Image { path, center, scale },
                (None, Some(path)) => commands::PredictSource::Annotations(path),
                (None, None) => return Err(CliError::Config("--image or --data is required".into())),
            };
            commands::predict(&cfg.load()?, &checkpoint, source, &out, zoom, max_images)
        }
        Command::Gradcheck { cfg, instances, seed } => commands::gradcheck(&cfg.load()?, instances, seed),
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<config::RunConfig, CliError> {
        config::RunConfig::load(self.preset.as_deref(), self.config.as_deref(), &self.sets)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
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
