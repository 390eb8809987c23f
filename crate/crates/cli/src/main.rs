//! `asid`: command-line front end for the sample identification pipeline.
//!
//! Exit codes: 0 on success, 1 on usage errors (unknown flags, missing
//! arguments, invalid config), 2 when a run fails.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "asid", version, about = "Automatic sample identification", propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// TOML run configuration [default: built-in defaults]
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed override [default: config `seed`, 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads, 1 forces the sequential path [default: config `threads`, 0 = all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run even if weights, database and index come from different encoders
    #[arg(long, global = true, default_value_t = false)]
    pub force: bool,
}

/// Where training tracks come from.
#[derive(Args, Debug, Clone)]
#[command(group(ArgGroup::new("tracks").args(["stems", "synthetic"])))]
pub struct TrackArgs {
    /// Directory of tracks, one sub-directory of {vocals,drums,bass,other}.wav each [default: config `paths.stems`]
    #[arg(long, value_name = "DIR")]
    pub stems: Option<PathBuf>,
    /// Use this many procedurally generated multi-stem tracks instead
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Length of each synthetic track in seconds
    #[arg(long, default_value_t = 20.0)]
    pub synthetic_seconds: f64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Encode audio into per-segment fingerprints and/or a reference database
    #[command(group(ArgGroup::new("input").required(true).args(["audio", "audio_dir"])))]
    #[command(group(ArgGroup::new("output").required(true).multiple(true).args(["out", "db"])))]
    Fingerprint {
        /// Audio file(s); the file stem becomes the song id
        #[arg(long, num_args = 1.., value_name = "FILE")]
        audio: Vec<PathBuf>,
        /// Directory of .wav files to ingest
        #[arg(long, value_name = "DIR")]
        audio_dir: Option<PathBuf>,
        /// Trained weights bundle
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        /// Write fingerprints as a JSON array of {song, offset, fingerprint}
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Write a reference database (fingerprints plus node matrices)
        #[arg(long, value_name = "FILE")]
        db: Option<PathBuf>,
    },
    /// Generate augmented query/reference training pairs as WAV files
    GenPairs {
        #[command(flatten)]
        tracks: TrackArgs,
        /// Number of pairs
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Output directory (created if missing)
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the fingerprint encoder contrastively
    TrainEncoder {
        #[command(flatten)]
        tracks: TrackArgs,
        /// Encoder size: full, tiny or toy [default: config `encoder` section]
        #[arg(long)]
        preset: Option<String>,
        /// Training steps [default: config `train_encoder.steps`, 2000]
        #[arg(long)]
        steps: Option<usize>,
        /// Pairs per step [default: config `train_encoder.batch_size`, 64]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Output weights bundle
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Training log as JSON
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Train the match classifier on top of a frozen encoder
    TrainClassifier {
        #[command(flatten)]
        tracks: TrackArgs,
        /// Weights bundle holding the trained encoder
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        /// Epochs [default: config `train_classifier.epochs`, 5]
        #[arg(long)]
        epochs: Option<usize>,
        /// Batches per epoch [default: config `train_classifier.steps_per_epoch`, 100]
        #[arg(long)]
        steps_per_epoch: Option<usize>,
        /// Positive pairs per batch [default: config `train_classifier.batch_size`, 32]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Fresh pairs for the post-training AUROC estimate (0 skips it)
        #[arg(long, default_value_t = 64)]
        auroc_pairs: usize,
        /// Output weights bundle (encoder plus classifier)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Training log as JSON
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Build an IVF-PQ index over a reference database
    BuildIndex {
        /// Reference database written by `fingerprint --db`
        #[arg(long, value_name = "FILE")]
        db: PathBuf,
        /// Output index file
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Coarse lists [default: config `index.nlist`, sqrt(n) rounded to a power of two]
        #[arg(long)]
        nlist: Option<usize>,
        /// Subquantizers [default: config `index.m`, 16]
        #[arg(long)]
        m: Option<usize>,
        /// Bits per sub-code [default: config `index.nbits`, 8]
        #[arg(long)]
        nbits: Option<u32>,
        /// Lists probed per search [default: config `index.nprobe`, 8]
        #[arg(long)]
        nprobe: Option<usize>,
    },
    /// Identify the reference songs sampled in a query recording
    Query {
        #[arg(long, value_name = "FILE")]
        index: PathBuf,
        #[arg(long, value_name = "FILE")]
        db: PathBuf,
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        /// Query audio
        #[arg(long, value_name = "FILE")]
        audio: PathBuf,
        /// ANN matches kept per query segment [default: config `retrieval.topk_per_segment`, 20]
        #[arg(long)]
        topk_per_segment: Option<usize>,
        /// Rejection threshold [default: config `retrieval.threshold`, 0.5]
        #[arg(long)]
        threshold: Option<f64>,
        /// Lists probed per search [default: the index's nprobe]
        #[arg(long)]
        nprobe: Option<usize>,
        /// Score candidates only against query segments within this many hops of one that retrieved them [default: config `retrieval.scope`, all segments]
        #[arg(long)]
        scope_window: Option<usize>,
        /// Report path [default: stdout]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Compute mAP, hit rates and strata against annotations
    Evaluate {
        /// Annotation CSV
        #[arg(long, value_name = "FILE")]
        annotations: PathBuf,
        /// Directory with <query_id>.wav [default: config `paths.audio_root`]
        #[arg(long, value_name = "DIR")]
        audio_root: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        index: PathBuf,
        #[arg(long, value_name = "FILE")]
        db: PathBuf,
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        /// Crop lengths in seconds for hit rates
        #[arg(long, value_delimiter = ',', default_value = "5,7,10,15,20")]
        lengths: Vec<f64>,
        /// Cut-offs for hit rates
        #[arg(long, value_delimiter = ',', default_value = "1,3,10")]
        top_n: Vec<usize>,
        /// Skip the cropped-query hit rates
        #[arg(long, default_value_t = false)]
        no_hit_rates: bool,
        /// Report path [default: stdout]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences
    Gradcheck {
        /// Encoder size for the encoder check: tiny, toy or full
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// Coordinates sampled per parameter block
        #[arg(long, default_value_t = 64)]
        coords: usize,
        /// Report path [default: stdout]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant suite on synthetic data
    Selftest {
        /// Report path [default: stdout]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<asid::Error> for Failure {
    fn from(e: asid::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
