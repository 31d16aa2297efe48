//! Command-line arguments shared by the binary and its tests.

use std::path::PathBuf;

use camelsplat::gaussians::BindingMode;
use clap::Args;

pub fn parse_mode(s: &str) -> Result<BindingMode, String> {
    BindingMode::parse(s).ok_or_else(|| format!("unknown binding mode `{s}` (expected none, lsw, gom or camel)"))
}

#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// none, lsw, gom or camel.
    #[arg(long, value_parser = parse_mode)]
    pub binding_mode: Option<BindingMode>,
    /// Freeze the per-frame poses.
    #[arg(long)]
    pub no_pose_opt: bool,
    /// Drop both depth terms.
    #[arg(long)]
    pub no_depth_loss: bool,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scene spec (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from the 16-frame mini scene.
    #[arg(long)]
    pub mini: bool,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub sigma_rot: Option<f64>,
    #[arg(long)]
    pub sigma_trans: Option<f64>,
    #[arg(long)]
    pub depth_noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunFlags,
    /// all, uniform80, first80 or views:N.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long, default_value_t = 1e-3)]
    pub gradcheck_tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Check at the cloud of this checkpoint instead of the initial cloud.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration; only the binding mode and renderer thresholds are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub binding_mode: Option<BindingMode>,
    /// Split the checkpoint was trained with.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Comma-separated frame indices; default is the held-out frames, or all.
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    /// Render this many views on a full orbit instead of scene frames.
    #[arg(long)]
    pub orbit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub binding_mode: Option<BindingMode>,
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated optimizer seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Run cells concurrently.
    #[arg(long)]
    pub parallel: bool,
}
