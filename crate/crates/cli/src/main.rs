//! `hic`: dataset, evaluation, localization and review pipelines.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "hic", version, about = "Honeycomb defect dataset and evaluation toolkit")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cut COCO images into labeled patches and write the manifest.
    Patchgen(commands::PatchgenArgs),
    /// Patch counts for several area thresholds, compared to the published table.
    ThetaSweep(commands::SweepArgs),
    /// Seeded image-level train/val/test split of a COCO file.
    Split(commands::SplitArgs),
    /// Concatenate two COCO files with origin tags.
    Merge(commands::MergeArgs),
    /// COCO-style detection metrics and the confidence-threshold table.
    DetEval(commands::DetEvalArgs),
    /// Patch-classification metrics from a manifest and score files.
    ClsEval(commands::ClsEvalArgs),
    /// Score images window by window and draw confidence overlays.
    Tile(commands::TileArgs),
    /// Grad-CAM composite from exported .camt tensors.
    Cam(commands::CamArgs),
    /// Expert review sessions.
    Review {
        #[command(subcommand)]
        cmd: ReviewCmd,
    },
}

#[derive(Subcommand)]
enum ReviewCmd {
    /// Serve the review API, assets and UI.
    Serve(commands::ServeArgs),
    /// Create (or look up) a session from a spec file.
    Create(commands::CreateArgs),
    /// Print the tally of a session.
    Tally(commands::TallyArgs),
}

/// Shared by every subcommand that reads a store directory.
#[derive(Args, Clone)]
pub struct StoreArg {
    /// Review store directory (sessions/ and assessments.jsonl).
    #[arg(long, default_value = "review-store")]
    pub store: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = match commands::configure_threads(cli.sequential) {
        Ok(e) => e,
        Err(e) => return commands::report(e),
    };
    let result = match cli.cmd {
        Cmd::Patchgen(a) => commands::patchgen(a, exec),
        Cmd::ThetaSweep(a) => commands::theta_sweep(a, exec),
        Cmd::Split(a) => commands::split(a),
        Cmd::Merge(a) => commands::merge(a),
        Cmd::DetEval(a) => commands::det_eval(a, exec),
        Cmd::ClsEval(a) => commands::cls_eval(a, exec),
        Cmd::Tile(a) => commands::tile(a, exec),
        Cmd::Cam(a) => commands::cam(a, exec),
        Cmd::Review { cmd } => match cmd {
            ReviewCmd::Serve(a) => commands::review_serve(a),
            ReviewCmd::Create(a) => commands::review_create(a),
            ReviewCmd::Tally(a) => commands::review_tally(a),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::report(e),
    }
}
