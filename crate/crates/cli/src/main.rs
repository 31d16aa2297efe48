//! `camelsplat` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! divergence or a failed gradient check.

use std::process::ExitCode;

use camelsplat_cli::commands::{self, CliError};
use camelsplat_cli::{AblateArgs, EvaluateArgs, GenSceneArgs, GradcheckArgs, OptimizeArgs, RenderArgs};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "camelsplat", version, about = "Joint body-pose and Gaussian-avatar refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    GenScene(GenSceneArgs),
    /// Optimize the cloud and per-frame poses of a scene.
    Optimize(OptimizeArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Render a checkpoint at scene frames or along a novel orbit.
    Render(RenderArgs),
    /// Report pose and image metrics of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Run the binding-mode and component ablation table.
    Ablate(AblateArgs),
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("CAMELSPLAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("CAMELSPLAT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|_| match cli.command {
        Command::GenScene(a) => commands::gen_scene(&a),
        Command::Optimize(a) => commands::optimize(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Render(a) => commands::render(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Ablate(a) => commands::ablate(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
