//! `pssg`: synthetic data, base pretraining, encoder training, two-stage
//! style adaptation, inference and evaluation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing or
//! unreadable artifact, 4 numeric failure.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "pssg", version, about = "Portrait sketch style adaptation over a frozen generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run directory holding checkpoints and logs.
    #[arg(long, default_value = "run")]
    pub run: PathBuf,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, wins over the configuration file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root seed; every component derives its own seed from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "I")]
    One,
    #[value(name = "II")]
    Two,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic photo/sketch pairs into `<out>/{photos,sketches,meta.json}`.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..pssg::data::NUM_STYLES as i64))]
        style: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base generator and discriminator on photos.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory of photos; synthetic faces are rendered when absent.
        #[arg(long)]
        photos: Option<PathBuf>,
    },
    /// Train the inversion encoder against the frozen base generator.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
    },
    /// Train the adaptation blocks (Stage I, Stage II or both).
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Paired dataset root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Turn one photo into a sketch.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        photo: PathBuf,
        /// Sketch whose style is transferred.
        #[arg(long)]
        style_ref: Option<PathBuf>,
        /// Use the first sketch of this style in `--data` as the exemplar.
        #[arg(long, requires = "data")]
        style_id: Option<u8>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Adaptation checkpoint; defaults to the latest stage in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Latent direction: little-endian f32 values, one per latent dimension.
        #[arg(long)]
        edit: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0, requires = "edit")]
        mag: f32,
        /// Inclusive range of latent segments the edit touches, e.g. `0-3`.
        #[arg(long, requires = "edit")]
        edit_layers: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained model on a paired dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report directory; defaults to `<run>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if pssg::backend::deterministic_requested() {
        pssg::backend::enter_deterministic_mode();
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData { n, res, style, seed, out } => commands::synth_data(n, res, style, seed, &out),
        Command::Pretrain { common, photos } => commands::pretrain(&common, photos.as_deref()),
        Command::TrainEncoder { common } => commands::train_encoder(&common),
        Command::Adapt { common, data, stage } => commands::adapt(&common, &data, stage),
        Command::Infer {
            common,
            photo,
            style_ref,
            style_id,
            data,
            checkpoint,
            edit,
            mag,
            edit_layers,
            out,
        } => commands::infer(
            &common,
            &commands::InferArgs {
                photo,
                style_ref,
                style_id,
                data,
                checkpoint,
                edit,
                mag,
                edit_layers,
                out,
            },
        ),
        Command::Eval {
            common,
            data,
            checkpoint,
            out,
        } => commands::eval(&common, &data, checkpoint.as_deref(), out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
