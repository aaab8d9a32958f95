//! `gpmatch`: dense matching, synthetic evaluation and analysis tools.
//!
//! Exit status: 0 on success, 1 on a runtime or numerical failure, 2 on a
//! usage or configuration error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use gpmatch::embedding::BasisKind;
use gpmatch::features::DescriptorParams;
use gpmatch::pipeline::{EmbeddingKind, PipelineConfig, RegressorKind};

/// A failed invocation and its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    /// Classifies a library error, prefixed with `context` (usually a path).
    pub fn from_lib(context: &str, e: gpmatch::Error) -> Self {
        use gpmatch::Error as E;
        let code = match e {
            E::InvalidArgument(_) | E::Format { .. } | E::UnsupportedFormat(_) => 2,
            _ => 1,
        };
        let message = if context.is_empty() { e.to_string() } else { format!("{context}: {e}") };
        Self { code, message }
    }
}

/// Comma-separated list; `none` or an empty string is the empty list.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self(Vec::new()));
        }
        s.split(',').map(|t| t.trim().parse::<T>().map_err(|e| format!("'{t}': {e}"))).collect::<Result<_, _>>().map(Self)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Parser)]
#[command(name = "gpmatch", version, about = "Dense image matching by Gaussian-process regression onto embedded coordinates")]
pub struct Cli {
    /// Worker threads; 0 uses one per core. Outputs do not depend on it.
    #[arg(long, global = true, env = "DKM_THREADS", default_value_t = 0)]
    pub threads: usize,

    /// `key = value` file of defaults for the subcommand's flags (long names,
    /// without dashes). Flags on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Match a query against a support input (PNM images or DKFM feature
    /// files) and write the dense warp as DKWF.
    #[command(args_override_self = true)]
    Match(MatchArgs),
    /// Run the synthetic homography benchmark.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Two-branch 1-D regression example: GP, kernel smoother and nearest
    /// neighbour curves as CSV.
    #[command(args_override_self = true)]
    Toy(ToyArgs),
    /// Deviation of the empirical embedding kernel from its limit, per
    /// embedding dimension.
    #[command(name = "embed-bench", args_override_self = true)]
    EmbedBench(EmbedBenchArgs),
    /// Accuracy of a predicted warp against a reference warp, or AUC/mAP of
    /// a list of angular pose errors.
    #[command(args_override_self = true)]
    Metrics(MetricsArgs),
    /// Dense descriptor files.
    #[command(subcommand)]
    Features(FeaturesCmd),
}

#[derive(Debug, Subcommand)]
pub enum FeaturesCmd {
    /// Extract descriptors from images into `<stem>.s<stride>.dkfm` files.
    #[command(args_override_self = true)]
    Export(ExportArgs),
    /// Print the header and norm statistics of a DKFM file.
    #[command(args_override_self = true)]
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DescriptorArgs {
    /// Gradient orientation bins.
    #[arg(long, default_value_t = 8)]
    pub orientation_bins: usize,
    /// Histogram sub-blocks per window side (each one stride wide).
    #[arg(long, default_value_t = 4)]
    pub blocks_per_side: usize,
    /// Levels of the intensity pyramid appended to the histogram.
    #[arg(long, default_value_t = 3)]
    pub pyramid_levels: usize,
    /// Per-bin cap before renormalization.
    #[arg(long, default_value_t = 0.2)]
    pub histogram_clip: f64,
    /// Weight of the intensity pyramid.
    #[arg(long, default_value_t = 0.5)]
    pub pyramid_weight: f64,
}

impl DescriptorArgs {
    pub fn params(&self) -> DescriptorParams {
        DescriptorParams {
            orientation_bins: self.orientation_bins,
            blocks_per_side: self.blocks_per_side,
            pyramid_levels: self.pyramid_levels,
            histogram_clip: self.histogram_clip,
            pyramid_weight: self.pyramid_weight,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Regressor: gp, attention (kernel smoother) or nn.
    #[arg(long, default_value = "gp")]
    pub regressor: RegressorKind,
    /// Coordinate embedding: fourier, se, cossq or identity (raw coordinates).
    #[arg(long, default_value = "fourier")]
    pub embedding: EmbeddingKind,
    /// Embedding dimension.
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    /// Inverse length scale of the embedding, in normalized units.
    #[arg(long, default_value_t = 10.0)]
    pub inverse_length: f64,
    /// Temperature of the exponential cosine-similarity kernel.
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    /// Norm guard of the cosine similarity.
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Initial diagonal jitter of the GP solve.
    #[arg(long, default_value_t = 1e-4)]
    pub jitter: f64,
    /// Regression strides, coarse first.
    #[arg(long, default_value = "32,16")]
    pub gp_strides: List<usize>,
    /// Local refinement strides; `none` disables refinement.
    #[arg(long, default_value = "16,8,4,2")]
    pub refine_strides: List<usize>,
    /// Refinement search half-window, in cells.
    #[arg(long, default_value_t = 2)]
    pub refine_window: usize,
    /// Coherence filtering after every level.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub coherence: bool,
    /// Coherence neighbourhood radius, in cells.
    #[arg(long, default_value_t = 2)]
    pub coherence_radius: usize,
    /// Spatial bandwidth of the coherence filter, in query cells.
    #[arg(long, default_value_t = 2.0)]
    pub coherence_spatial: f64,
    /// Flow bandwidth of the coherence filter, in support cells.
    #[arg(long, default_value_t = 2.0)]
    pub coherence_flow: f64,
    /// Minimum separation of decoded modes, in support cells.
    #[arg(long, default_value_t = 3.0)]
    pub nms_radius: f64,
    /// Modes kept per query.
    #[arg(long, default_value_t = 4)]
    pub max_modes: usize,
    /// Soft-argmax half-window, in cells.
    #[arg(long, default_value_t = 2)]
    pub decode_window: usize,
    /// Soft-argmax temperature on the max-normalized correlation.
    #[arg(long, default_value_t = 0.05)]
    pub temperature: f64,
    /// Modes weaker than this fraction of the top score are dropped.
    #[arg(long, default_value_t = 0.2)]
    pub min_relative_score: f64,
    /// Soft-argmax re-centring passes.
    #[arg(long, default_value_t = 3)]
    pub recenter_iterations: usize,
    /// Side of the posterior-variance neighbourhood (odd).
    #[arg(long, default_value_t = 5)]
    pub variance_window: usize,
    /// Confidence calibration `a,b` of `logistic(a·score − b·variance)`.
    #[arg(long, default_value = "6,3")]
    pub calibration: List<f64>,
    /// Seed of the embedding basis.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub descriptor: DescriptorArgs,
}

impl PipelineArgs {
    pub fn config(&self) -> Result<PipelineConfig, Failure> {
        let [a, b] = self.calibration.0[..] else {
            return Err(Failure::usage(format!("--calibration takes two numbers, got '{}'", self.calibration)));
        };
        let mut c = PipelineConfig {
            regressor: self.regressor,
            embedding: self.embedding,
            dim: self.dim,
            inverse_length: self.inverse_length,
            tau: self.tau,
            epsilon: self.epsilon,
            jitter: self.jitter,
            gp_strides: self.gp_strides.0.clone(),
            refine_strides: self.refine_strides.0.clone(),
            refine_window: self.refine_window,
            coherence: self.coherence,
            coherence_radius: self.coherence_radius,
            coherence_spatial: self.coherence_spatial,
            coherence_flow: self.coherence_flow,
            variance_window: self.variance_window,
            confidence_calibration: (a, b),
            descriptor: self.descriptor.params(),
            seed: self.seed,
            ..PipelineConfig::default()
        };
        c.decode.nms_radius_cells = self.nms_radius;
        c.decode.max_modes = self.max_modes;
        c.decode.window = self.decode_window;
        c.decode.temperature = self.temperature;
        c.decode.min_relative_score = self.min_relative_score;
        c.decode.refine_iterations = self.recenter_iterations;
        c.validate().map_err(|e| Failure::from_lib("pipeline configuration", e))?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Query image (PGM/PPM) or DKFM feature file.
    pub query: PathBuf,
    /// Support image or feature file, same kind as the query.
    pub support: PathBuf,
    /// Output DKWF warp.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also write the most confident matches as text.
    #[arg(long, value_name = "FILE")]
    pub matches: Option<PathBuf>,
    /// Number of matches written with --matches.
    #[arg(long, default_value_t = 1000)]
    pub top_k: usize,
    /// Clip the warp into the support image before writing.
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub clip: bool,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

/// What the benchmark evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalTarget {
    /// The configured matching pipeline.
    Matcher,
    /// The reference warp (upper bound).
    Oracle,
    /// Every pixel mapped to itself.
    Identity,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output directory for `pairs.csv` and `summary.txt`.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Number of synthetic pairs.
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    /// Number of procedural textures; pair i uses texture i mod count.
    #[arg(long, default_value_t = 20)]
    pub images: usize,
    /// Side of the square textures, in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, value_enum, default_value_t = EvalTarget::Matcher)]
    pub target: EvalTarget,
    /// Maximum absolute rotation, in degrees.
    #[arg(long, default_value_t = 15.0)]
    pub max_rotation: f64,
    /// Scale range `lo,hi`.
    #[arg(long, default_value = "0.85,1.2")]
    pub scale: List<f64>,
    /// Maximum absolute translation per axis, in normalized units.
    #[arg(long, default_value_t = 0.15)]
    pub max_translation: f64,
    /// Maximum absolute projective coefficient.
    #[arg(long, default_value_t = 0.05)]
    pub max_perspective: f64,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Matches handed to RANSAC.
    #[arg(long, default_value_t = 1000)]
    pub top_k: usize,
    #[arg(long, default_value_t = 500)]
    pub ransac_iterations: usize,
    /// RANSAC inlier threshold, in normalized units.
    #[arg(long, default_value_t = 0.02)]
    pub ransac_threshold: f64,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    /// Output CSV; stdout when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Support samples.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Kernel length scale.
    #[arg(long, default_value_t = 0.1)]
    pub length: f64,
    /// Mixture weights `w1,w2`.
    #[arg(long, default_value = "0.8,0.2")]
    pub weights: List<f64>,
    /// Variance of the branch noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise_variance: f64,
    /// GP observation noise.
    #[arg(long, default_value_t = 1e-2)]
    pub jitter: f64,
    /// Query points on [0, 1].
    #[arg(long, default_value_t = 512)]
    pub queries: usize,
}

#[derive(Debug, Args)]
pub struct EmbedBenchArgs {
    /// Basis: fourier, se or cossq.
    #[arg(long, default_value = "fourier")]
    pub basis: BasisKind,
    /// Embedding dimensions to sweep.
    #[arg(long = "D", visible_alias = "dims", default_value = "256,1024,4096,16384")]
    pub dims: List<usize>,
    /// Inverse length scale.
    #[arg(long, default_value_t = 1.0)]
    pub inverse_length: f64,
    /// Random point pairs in [-1, 1]², shared across dimensions.
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    /// Independent bases per dimension.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Predicted DKWF warp.
    #[arg(long, required_unless_present = "pose_errors", requires = "reference")]
    pub pred: Option<PathBuf>,
    /// Reference DKWF warp; pixels with confidence above --mask-threshold
    /// are evaluated.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Text file of angular pose errors in degrees, one per line.
    #[arg(long, conflicts_with = "pred")]
    pub pose_errors: Option<PathBuf>,
    /// Support image size `height,width` for pixel units; defaults to the
    /// warp size.
    #[arg(long)]
    pub support_dims: Option<List<usize>>,
    #[arg(long, default_value_t = 0.5)]
    pub mask_threshold: f64,
    /// Per-threshold precision CSV (thresholds 1..=--max-threshold).
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub max_threshold: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Input images (PGM/PPM).
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value = "16,32")]
    pub strides: List<usize>,
    #[command(flatten)]
    pub descriptor: DescriptorArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub file: PathBuf,
}

/// Parses `argv`, applying the config file named by `--config` if any.
fn parse(argv: Vec<String>) -> Result<Cli, clap::Error> {
    let first = Cli::try_parse_from(&argv)?;
    let Some(path) = first.config.clone() else { return Ok(first) };
    let source = path.display().to_string();
    let text = std::fs::read_to_string(&path).map_err(|e| usage_error(format!("{source}: {e}")))?;
    let entries = config::parse(&text, &source).map_err(|f| usage_error(f.message))?;
    let path_names: Vec<&str> = match &first.command {
        Cmd::Match(_) => vec!["match"],
        Cmd::Eval(_) => vec!["eval"],
        Cmd::Toy(_) => vec!["toy"],
        Cmd::EmbedBench(_) => vec!["embed-bench"],
        Cmd::Metrics(_) => vec!["metrics"],
        Cmd::Features(FeaturesCmd::Export(_)) => vec!["features", "export"],
        Cmd::Features(FeaturesCmd::Inspect(_)) => vec!["features", "inspect"],
    };
    let mut cmd = Cli::command();
    cmd.build();
    let mut sub = &cmd;
    for n in &path_names {
        sub = sub.find_subcommand(n).expect("known subcommand");
    }
    let flags = config::to_flags(&entries, sub, &source).map_err(|f| usage_error(f.message))?;
    let argv = config::splice(&argv, &path_names, flags);
    let m = Cli::command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&m)
}

fn usage_error(msg: String) -> clap::Error {
    Cli::command().error(clap::error::ErrorKind::InvalidValue, msg)
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args().collect()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
