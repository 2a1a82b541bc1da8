use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "spikeconv",
    version,
    about = "Convert CNNs to rate-coded spiking networks and measure the result"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, calibrate and normalize a model.
    Convert {
        #[arg(long)]
        model: PathBuf,
        /// Calibration batch, a tensor shaped [N, ...input].
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        p_lo: f64,
        #[arg(long, default_value_t = 99.99)]
        p_hi: f64,
        /// Manifest path of the normalized model; the blob goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the spiking network on one or more images.
    Simulate {
        /// Normalized model manifest.
        #[arg(long)]
        model: PathBuf,
        /// Image tensors, [H, W, C] or a batch [N, H, W, C].
        #[arg(long = "image", alias = "images", required = true, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000.0)]
        duration: f64,
        #[arg(long, default_value_t = 1.0)]
        dt: f64,
        #[arg(long, default_value_t = 0.0)]
        transient: f64,
        /// Node ids to record; defaults to the model outputs.
        #[arg(long, value_delimiter = ',')]
        record: Vec<String>,
        /// Directory for per-image, per-layer raster dumps.
        #[arg(long)]
        raster_out: Option<PathBuf>,
        /// Rates CSV; printed to stdout when absent.
        #[arg(long)]
        rates_out: Option<PathBuf>,
        /// Rate time series CSV, one row per node every --sample-every steps.
        #[arg(long)]
        series_out: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        sample_every: usize,
    },
    /// Correlate spiking rates with analog activations at several times.
    Correlate {
        /// Original (raw or parsed) model manifest.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        normalized: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 2000.0)]
        duration: f64,
        /// Times in ms at which to report correlations.
        #[arg(long, value_delimiter = ',', required = true)]
        at: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        transient: f64,
        /// Report CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-neuron (analog, rate) pairs, one file per requested time.
        #[arg(long)]
        scatter_out: Option<PathBuf>,
        /// Use analog values in place of rates (checks the plumbing).
        #[arg(long)]
        self_check: bool,
    },
    /// mAP of the spiking detector over simulation time.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        normalized: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 2000.0)]
        duration: f64,
        #[arg(long, default_value_t = 50.0)]
        sample_every: f64,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        transient: f64,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Series CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a deterministic fixture model and data.
    GenFixtures {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Convert {
            model,
            calib,
            p_lo,
            p_hi,
            out,
        } => commands::convert(&model, &calib, p_lo, p_hi, &out),
        Command::Simulate {
            model,
            images,
            duration,
            dt,
            transient,
            record,
            raster_out,
            rates_out,
            series_out,
            sample_every,
        } => commands::simulate(&commands::SimulateArgs {
            model,
            images,
            duration,
            dt,
            transient,
            record,
            raster_out,
            rates_out,
            series_out,
            sample_every,
        }),
        Command::Correlate {
            model,
            normalized,
            image,
            duration,
            at,
            transient,
            out,
            scatter_out,
            self_check,
        } => commands::correlate(&commands::CorrelateArgs {
            model,
            normalized,
            image,
            duration,
            at,
            transient,
            out,
            scatter_out,
            self_check,
        }),
        Command::Evaluate {
            model,
            normalized,
            dataset,
            duration,
            sample_every,
            anchors,
            transient,
            iou,
            out,
        } => commands::evaluate(&commands::EvaluateArgs {
            model,
            normalized,
            dataset,
            duration,
            sample_every,
            anchors,
            transient,
            iou,
            out,
        }),
        Command::GenFixtures {
            kind,
            seed,
            count,
            image_size,
            out_dir,
        } => commands::gen_fixtures(&kind, seed, count, image_size, &out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
