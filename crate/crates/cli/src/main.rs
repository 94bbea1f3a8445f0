mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multi-style, multi-view consistent stylization of radiance fields.
///
/// Settings resolve as: flags, then `--config`, then the run's saved
/// `config.json`, then built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "mmstyle", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scene directory (manifest.json plus view images)
    #[arg(long, global = true)]
    pub scene: Option<PathBuf>,
    /// Style manifest (styles.json)
    #[arg(long, global = true)]
    pub styles: Option<PathBuf>,
    /// Seed behind every random choice [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Stylization iterations [default: 5000]
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    /// Rays per stylization step [default: 1024]
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Cosine distance below which a style counts as known [default: 0.1]
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Worker threads for pregeneration and rendering, 0 for all cores [default: 0]
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output path of the command (scene directory, image, or plot directory)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run directory [default: runs/default]
    #[arg(long, global = true)]
    pub run: Option<PathBuf>,
    /// JSON file mirroring the training configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic scene with exact geometry
    GenScene {
        /// Number of views [default: 6]
        #[arg(long, default_value_t = 6)]
        views: usize,
        /// Square image side in pixels [default: 96]
        #[arg(long, default_value_t = 96)]
        res: usize,
        /// Also write this many catalog image styles and a styles.json
        #[arg(long, default_value_t = 0)]
        with_styles: usize,
        /// Also add this many catalog text prompts to styles.json
        #[arg(long, default_value_t = 0)]
        with_text_styles: usize,
    },
    /// Fit the field, the text correction network and the MLS heads
    Pretrain,
    /// Pregenerate consistent supervision for every style
    Pregen,
    /// Stylization training over every style
    Train,
    /// Incrementally learn one new style on a trained run
    AddStyle {
        /// Id of the new style
        #[arg(long)]
        id: String,
        #[command(flatten)]
        payload: Payload,
    },
    /// Render a training view in one style
    Render {
        /// Registered style id
        #[arg(long, conflicts_with_all = ["image", "text"])]
        style_id: Option<String>,
        #[command(flatten)]
        payload: OptionalPayload,
        /// Training view index [default: 0]
        #[arg(long, default_value_t = 0)]
        view: usize,
    },
    /// Consistency and fidelity metrics; writes metrics.json
    Evaluate,
    /// Loss curves and the correction histogram as PNG
    Plot,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Payload {
    /// Style image (PNG)
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Style text prompt
    #[arg(long)]
    pub text: Option<String>,
}

#[derive(Debug, Args)]
#[group(required = false, multiple = false)]
pub struct OptionalPayload {
    /// Style image (PNG), matched against the trained styles
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Style text prompt, matched against the trained styles
    #[arg(long)]
    pub text: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .parse_env("MMSTYLE_LOG")
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
