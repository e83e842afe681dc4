//! Command-line surface.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use ssm::data::{DefectKind, TextureFamily};
use ssm::inference::ScoreNumerator;
use ssm::masking::ScaleSet;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "ssm",
    version,
    about = "Anomaly detection and localization by self-supervised masking",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic texture corpus with ground-truth masks.
    Synth(SynthArgs),
    /// Train a restoration network per category and calibrate thresholds.
    Train(TrainArgs),
    /// Score one image or a directory of images with a trained checkpoint.
    Detect(DetectArgs),
    /// Detect every test image of a dataset and write the AUC report.
    Eval(EvalArgs),
    /// Print the header of a checkpoint.
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Detect(_) => "detect",
            Command::Eval(_) => "eval",
            Command::Inspect(_) => "inspect",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Synth(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Detect(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Inspect(a) => &a.common,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// File of `key = value` lines setting any long flag of the subcommand;
    /// flags given on the command line take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads [default: available cores].
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,
}

/// `H` or `HxW`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let dim = |t: &str| match t.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("bad resolution {s:?}; expected H or HxW")),
        };
        match s.split_once(['x', 'X']) {
            Some((h, w)) => Ok(Self {
                height: dim(h)?,
                width: dim(w)?,
            }),
            None => {
                let v = dim(s)?;
                Ok(Self {
                    height: v,
                    width: v,
                })
            }
        }
    }
}

/// Comma-separated list, parsed as a single value so that later
/// occurrences replace earlier ones.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct CommaList<T>(pub Vec<T>);

impl<T: FromStr> FromStr for CommaList<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let items = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<T>().map_err(|e| format!("{t:?}: {e}")))
            .collect::<Result<Vec<T>, String>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(Self(items))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Numerator {
    /// Sum of the score map over the whole image.
    FullImage,
    /// Sum of the score map over masked pixels only.
    MaskedOnly,
}

impl From<Numerator> for ScoreNumerator {
    fn from(n: Numerator) -> Self {
        match n {
            Numerator::FullImage => ScoreNumerator::FullImage,
            Numerator::MaskedOnly => ScoreNumerator::MaskedOnly,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output root; the corpus is written to <OUT>/<CATEGORY>.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Seed of every random choice in the corpus.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Category directory name [default: the texture family].
    #[arg(long)]
    pub category: Option<String>,
    /// Texture family: stripes, checker or value-noise.
    #[arg(long, default_value = "stripes")]
    pub family: TextureFamily,
    /// Image size, `H` or `HxW`.
    #[arg(long, default_value = "64")]
    pub resolution: Resolution,
    /// Defect types to cycle through.
    #[arg(long, default_value = "blob,scratch,color-patch")]
    pub defects: CommaList<DefectKind>,
    /// Smallest defect size in pixels.
    #[arg(long, default_value_t = 4)]
    pub defect_min: usize,
    /// Largest defect size in pixels.
    #[arg(long, default_value_t = 10)]
    pub defect_max: usize,
    /// Normal training images.
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    /// Normal validation images.
    #[arg(long, default_value_t = 20)]
    pub n_val: usize,
    /// Test images; half of them are defective.
    #[arg(long, default_value_t = 60)]
    pub n_test: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset root (one category, or a directory of categories).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory; each category gets <OUT>/<CATEGORY>/model.ckpt.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Train only this category.
    #[arg(long)]
    pub category: Option<String>,
    /// Seed of initialization, masks, shuffling and the validation split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training resolution [default: size of the first training image].
    #[arg(long)]
    pub resolution: Option<Resolution>,
    /// Grid sizes used for masking and detection.
    #[arg(long, default_value = "4,8,16")]
    pub scales: ScaleSet,
    /// Passes over the training images.
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    /// Images per optimizer step.
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Initial learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Epochs between learning-rate halvings.
    #[arg(long, default_value_t = 50)]
    pub lr_halving: usize,
    /// Decoupled weight decay applied to convolution weights.
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    /// Probability that a grid cell is masked.
    #[arg(long, default_value_t = 0.5)]
    pub p_mask: f64,
    /// Weight of the MSE loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    /// Weight of the GMS loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    /// Weight of the SSIM loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda3: f64,
    /// Weight of the mask loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda4: f64,
    /// Encoder channel widths, one per level.
    #[arg(long, default_value = "32,64,128,256")]
    pub widths: CommaList<usize>,
    /// Share of training images held out for thresholds when the category
    /// has no validation split.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Also save <OUT>/<CATEGORY>/epoch_NNNN.ckpt every N epochs (0: never).
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub checkpoint_every: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct InferenceArgs {
    /// Refinement iteration cap per scale.
    #[arg(long, default_value_t = 10)]
    pub max_iters: usize,
    /// Grid sizes to detect with [default: those of the checkpoint].
    #[arg(long)]
    pub scales: Option<ScaleSet>,
    /// Numerator of the per-scale image score.
    #[arg(long, value_enum, default_value = "full-image")]
    pub numerator: Numerator,
    /// Write score heatmaps here.
    #[arg(long, value_name = "DIR")]
    pub heatmap_dir: Option<PathBuf>,
    /// Stretch each heatmap to its own min and max instead of the raw score range.
    #[arg(long, requires = "heatmap_dir")]
    pub normalize_heatmaps: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Single image to score.
    #[arg(
        long,
        value_name = "FILE",
        conflicts_with = "data",
        required_unless_present = "data"
    )]
    pub image: Option<PathBuf>,
    /// Directory of PNG images to score.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Result JSON [default: stdout].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub inference: InferenceArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Dataset root with test/ and ground_truth/ splits.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// A checkpoint file, or a train output directory holding
    /// <CATEGORY>/model.ckpt per category.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Report JSON; a CSV and a timing file are written beside it.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Evaluate only this category.
    #[arg(long)]
    pub category: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub inference: InferenceArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    /// Checkpoint file.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}
