mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpie_core::model::Preset;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "cpie", version, about = "One-shot contour primitive extraction")]
struct Cli {
    /// TOML run configuration; missing keys take preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `toy` (desk-scale) or `paper` (full-width network).
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset: raw samples, distractor textures and
    /// held-out support/query views with their ground truth.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate support/query pairs from raw samples.
    GenPairs {
        /// Directory of `<stem>.png` images with `<stem>_mask.png` masks.
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        distractors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pairs per raw sample.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Test pairs keep 1-px masks; train pairs dilate the query mask.
        #[arg(long, value_enum, default_value_t = PairMode::Test)]
        mode: PairMode,
    },
    /// Train with pairs generated online at every step.
    Train(TrainArgs),
    /// Run the network on a query for one or more support masks.
    Extract(ExtractArgs),
    /// Thin raw contour maps with Gabor-filter non-maximum suppression.
    Thin {
        #[arg(long, num_args = 1.., required_unless_present = "bank_out")]
        input: Vec<PathBuf>,
        #[arg(long, required_unless_present = "bank_out")]
        out: Option<PathBuf>,
        /// Also write the kernel bank listing to this file.
        #[arg(long)]
        bank_out: Option<PathBuf>,
    },
    /// MF-ODS of predicted maps against 1-px ground truth.
    Eval(EvalArgs),
    /// Fit a line segment or circular arc to each thresholded map.
    Fit {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = KindArg::Auto)]
        kind: KindArg,
        /// Report file; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PairMode {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum KindArg {
    Auto,
    Ls,
    Ca,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    distractors: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Continue from the checkpoint already in `--checkpoint`.
    #[arg(long)]
    resume: bool,
    /// Train this many steps on a single pair made from the first raw sample.
    #[arg(long, conflicts_with = "resume")]
    overfit: Option<u64>,
}

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    support: PathBuf,
    /// One per contour primitive of interest; more than one runs batch mode.
    #[arg(long = "mask", required = true)]
    masks: Vec<PathBuf>,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    thin: bool,
    #[arg(long)]
    fit: bool,
    #[arg(long)]
    overlay: bool,
    #[arg(long)]
    illum_norm: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of predicted maps, matched to `--gt` by file name.
    #[arg(long, requires = "gt", conflicts_with_all = ["checkpoint", "pairs"])]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Predict with this checkpoint on the pairs in `--pairs` instead.
    #[arg(long, requires = "pairs")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<id>_support.png`, `<id>_support_mask.png`,
    /// `<id>_query.png`, `<id>_query_mask.png`.
    #[arg(long, requires = "checkpoint")]
    pairs: Option<PathBuf>,
    /// Thin predictions before thresholding.
    #[arg(long)]
    thin: bool,
    /// Normalize support and query illumination before prediction.
    #[arg(long, requires = "checkpoint")]
    illum_norm: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match RunConfig::load(cli.config.as_deref(), cli.preset, cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Fixtures { out } => commands::fixtures(&cfg, &out),
        Command::GenPairs {
            raw,
            distractors,
            out,
            count,
            mode,
        } => commands::gen_pairs(&cfg, &raw, &distractors, &out, count, mode),
        Command::Train(a) => commands::train(&cfg, &a),
        Command::Extract(a) => commands::extract(&cfg, &a),
        Command::Thin { input, out, bank_out } => commands::thin(&cfg, &input, out.as_deref(), bank_out.as_deref()),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Fit { input, kind, out } => commands::fit(&cfg, &input, kind, out.as_deref()),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} item(s) failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
