use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fluoromap::classify::{CONFUSABLE_THRESHOLD, DEFAULT_TAU};
use fluoromap::fingerprint::library::DEFAULT_LAMBDA_REL;
use fluoromap::ingest::DEFAULT_MAX_SHIFT_PX;
use fluoromap::metrics::DEFAULT_MATCH_RADIUS_PX;

mod commands;
mod files;
mod run_log;

#[derive(Parser, Debug)]
#[command(name = "fluoromap", version, about = "Multispectral fluorescence particle analysis")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Seed for k-means initialization and synthetic scenes.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Directory for every file a command writes.
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    /// Skip aligning the stack to the mask condition.
    #[arg(long, global = true)]
    pub no_register: bool,
    /// Number of k-means clusters.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Smallest region kept, in pixels.
    #[arg(long, global = true)]
    pub min_area: Option<u32>,
    /// Largest Mahalanobis distance still assigned to a class.
    #[arg(long, global = true, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Reference area for area-ratio evaluation.
    #[arg(long, global = true, value_enum, default_value_t = Reference::Median)]
    pub reference: Reference,
    /// Largest registration shift accepted per axis, in pixels.
    #[arg(long, global = true, default_value_t = DEFAULT_MAX_SHIFT_PX)]
    pub max_shift: u32,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    Median,
    Q1,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Four clusters, for filters with residue.
    Turbid,
    /// 100 px minimum area.
    Small,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Ycbcr,
    Rgb,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceArg {
    Samples,
    Pixel,
}

#[derive(Args, Debug, Clone)]
pub struct SegmentArgs {
    /// Stack manifest (TOML).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_enum, default_value_t = Space::Ycbcr)]
    pub feature_space: Space,
    /// Keep interior holes instead of filling them.
    #[arg(long)]
    pub no_fill_holes: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment the mask condition: mask, label map and region table.
    Segment(SegmentArgs),
    /// Measure every particle under every condition.
    Extract {
        #[command(flatten)]
        seg: SegmentArgs,
        /// Label map from `segment`; segments afresh when absent.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Append per-condition spreads to the feature vector.
        #[arg(long)]
        spread: bool,
        /// Store the pixel-level feature covariance of every particle.
        #[arg(long)]
        pixel_covariance: bool,
    },
    /// Build a polymer library from labeled fingerprints.
    BuildLibrary {
        /// Fingerprint file from `extract` (repeatable).
        #[arg(long, required = true)]
        fingerprints: Vec<PathBuf>,
        /// `region_id,class_name` table for the fingerprint file at the same position.
        #[arg(long)]
        classes: Vec<PathBuf>,
        /// Single class for every particle of the fingerprint file at the same position.
        #[arg(long = "class", conflicts_with = "classes")]
        class_names: Vec<String>,
        #[arg(long, value_enum, default_value_t = CovarianceArg::Samples)]
        covariance: CovarianceArg,
        #[arg(long, default_value_t = DEFAULT_LAMBDA_REL)]
        lambda_rel: f64,
    },
    /// Assign every fingerprint to its nearest library class.
    Classify {
        #[arg(long)]
        fingerprints: PathBuf,
        #[arg(long)]
        library: PathBuf,
    },
    /// Score detections and areas against ground truth.
    Evaluate {
        /// Ground-truth label map (16-bit PNG).
        #[arg(long)]
        truth_labels: PathBuf,
        /// Ground-truth `region_id,class_name` table; pure detection scoring when absent.
        #[arg(long)]
        truth_classes: Option<PathBuf>,
        /// Predicted label map from `segment`.
        #[arg(long)]
        predicted_labels: PathBuf,
        /// Results table from `classify`.
        #[arg(long)]
        predicted_classes: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS_PX)]
        match_radius: f64,
        /// Per-condition area table: `particle,reference,mask_area_px,<condition areas...>`.
        #[arg(long)]
        areas: Option<PathBuf>,
    },
    /// Class-to-class Mahalanobis distances of a library.
    DistanceMatrix {
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value_t = CONFUSABLE_THRESHOLD)]
        threshold: f64,
    },
    /// Render a synthetic stack with ground truth.
    Synth {
        /// Scene spec (TOML); a random scene is generated when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Class specs (TOML, `[[classes]]`); evenly spaced hues when absent.
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_classes: usize,
        #[arg(long, default_value_t = 2)]
        per_class: usize,
        #[arg(long, default_value_t = 256)]
        width: u32,
        #[arg(long, default_value_t = 256)]
        height: u32,
        /// HSV noise `σh,σs,σv` for generated classes.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.0, 0.0])]
        noise: Vec<f64>,
    },
    /// Luminous exposure (and absolute EV) of a capture setting.
    CalibrateEv {
        #[arg(long)]
        lux: f64,
        /// Exposure time in seconds.
        #[arg(long)]
        shutter: f64,
        /// f-number; prints the absolute EV when given.
        #[arg(long)]
        aperture: Option<f64>,
        #[arg(long, default_value_t = 100.0)]
        iso: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let g = &cli.global;
    let result = match cli.command {
        Command::Segment(seg) => commands::segment(g, &seg),
        Command::Extract { seg, labels, spread, pixel_covariance } => {
            commands::extract(g, &seg, labels.as_deref(), spread, pixel_covariance)
        }
        Command::BuildLibrary { fingerprints, classes, class_names, covariance, lambda_rel } => {
            commands::build_library(g, &fingerprints, &classes, &class_names, covariance, lambda_rel)
        }
        Command::Classify { fingerprints, library } => commands::classify(g, &fingerprints, &library),
        Command::Evaluate {
            truth_labels,
            truth_classes,
            predicted_labels,
            predicted_classes,
            match_radius,
            areas,
        } => commands::evaluate(
            g,
            &commands::EvaluateInputs {
                truth_labels,
                truth_classes,
                predicted_labels,
                predicted_classes,
                match_radius,
                areas,
            },
        ),
        Command::DistanceMatrix { library, threshold } => commands::distance_matrix(g, &library, threshold),
        Command::Synth { scene, classes, n_classes, per_class, width, height, noise } => match noise[..] {
            [h, s, v] => commands::synth(
                g,
                &commands::SynthInputs {
                    scene,
                    classes,
                    n_classes,
                    per_class,
                    width,
                    height,
                    noise: [h, s, v],
                },
            ),
            _ => Err(anyhow::anyhow!("--noise takes three comma-separated values: σh,σs,σv")),
        },
        Command::CalibrateEv { lux, shutter, aperture, iso } => commands::calibrate_ev(lux, shutter, aperture, iso),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
