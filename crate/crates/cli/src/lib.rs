//! The `emoreason` command line.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{run, CliError, Outcome};
pub use config::{ConfigErrors, PartialConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "emoreason", version, about = "Zero-shot emotion detection and emotional reasoning")]
pub struct Cli {
    /// TOML config file (also EMOREASON_CONFIG)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Canonical,
    Csv,
    Tsv,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Dataset to read
    #[arg(long)]
    pub input: PathBuf,
    /// Input format; guessed from the extension when omitted
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full pipeline: contexts, voted label, top-k labels with explanations
    Reason {
        #[command(flatten)]
        input: InputArgs,
        /// Augmented dataset to write
        #[arg(long)]
        output: PathBuf,
        /// Run report (defaults to <output>.report.json)
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-record intermediate artifacts
        #[arg(long)]
        audit: Option<PathBuf>,
        #[command(flatten)]
        config: PartialConfig,
    },
    /// Fixed-label prediction only
    Classify {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "emogen")]
        mode: ClassifyMode,
        #[command(flatten)]
        config: PartialConfig,
    },
    /// Accuracy and macro-F1 of predictions against gold labels
    Evaluate {
        /// Prediction or augmented file
        #[arg(long)]
        predictions: PathBuf,
        /// Dataset with gold labels
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Metrics JSON (defaults to <predictions>.metrics.json)
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "isear")]
        profile: String,
    },
    /// Label counts from an augmented dataset as a two-column table
    ExportDist {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "top1")]
        mode: DistMode,
        /// TSV to write; stdout when omitted
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Human evaluation
    Annotate {
        #[command(subcommand)]
        command: AnnotateCommand,
    },
    /// Response cache maintenance
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
    /// Print the resolved configuration as TOML
    ShowConfig {
        #[command(flatten)]
        config: PartialConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifyMode {
    Emogen,
    BaselineStandard,
    BaselineCot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistMode {
    /// Voted fixed-set label per record
    Voted,
    /// First selected label per record
    Top1,
    /// Every selected label
    AllTop,
    /// Gold labels
    Gold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderingArg {
    Random,
    Stratified,
    Sequential,
}

const DEFAULT_SERVER: &str = "http://127.0.0.1:8787";

#[derive(Debug, Subcommand)]
pub enum AnnotateCommand {
    /// Serve the annotation API and UI
    Serve {
        /// Augmented dataset
        #[arg(long)]
        dataset: PathBuf,
        /// Store directory
        #[arg(long, default_value = "annotations")]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8787")]
        bind: std::net::SocketAddr,
        #[arg(long, value_enum, default_value = "random")]
        ordering: OrderingArg,
        /// Seed for random ordering
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Built UI bundle directory
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Show the next task for an annotator
    Next {
        #[arg(long, default_value = DEFAULT_SERVER)]
        server: String,
        #[arg(long)]
        annotator: String,
    },
    /// Submit answers for one (sample, rank)
    Submit {
        #[arg(long, default_value = DEFAULT_SERVER)]
        server: String,
        #[arg(long)]
        annotator: String,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        rank: u32,
        /// Five answers, each 1 (Yes), 2 (Maybe) or 3 (No), e.g. 1,2,1,1,1
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        answers: Vec<u8>,
    },
    /// Per-question answer distribution
    Summary {
        #[arg(long, default_value = DEFAULT_SERVER)]
        server: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// Remove temp files, corrupt entries and, optionally, old entries
    Gc {
        /// Remove entries older than this many days
        #[arg(long)]
        max_age_days: Option<u64>,
        #[command(flatten)]
        config: PartialConfig,
    },
}
