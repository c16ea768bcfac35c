//! `slotforge` — induce slot boundaries in task-oriented utterances without
//! labels, by probing a trainable contextual encoder with perturbed masking.
//!
//! Subcommands cover the full pipeline: `split` a corpus by intent, `train`
//! the encoder with the two-level contrastive objective, `segment` utterances
//! (probed or branching baselines), `eval` predictions against gold slot
//! boundaries, `tune-depth` on a validation split, and `inspect` per-utterance
//! diagnostics. Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// An error in how the tool was invoked (exit code 2), as opposed to a
/// runtime failure (exit code 1).
#[derive(Debug)]
pub(crate) struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("ratio must be strictly between 0 and 1, got {v}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub(crate) enum BaselineArg {
    /// Probe the encoder with perturbed masking and cut the impact matrix.
    Upl,
    /// Left-branching baseline: peel single tokens off the right edge.
    Lb,
    /// Right-branching baseline: peel single tokens off the left edge.
    Rb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub(crate) enum DumpArg {
    /// Token-pair impact matrix as a comma-separated text file.
    Impact,
    /// Full greedy segmentation tree as JSON.
    Tree,
    /// Pairwise cosine similarities between pooled segment vectors as CSV.
    Segsim,
}

#[derive(Parser)]
#[command(
    name = "slotforge",
    version,
    about = "Unsupervised slot-boundary induction via perturbed-masking probes",
    propagate_version = true
)]
pub(crate) struct Cli {
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,

    /// Cap the number of worker threads used for encoder passes.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub(crate) enum Command {
    /// Split a corpus into two partitions with disjoint intent sets.
    ///
    /// Writes the split spec JSON to --out and materializes the partitions
    /// next to it as `<out>.p1.jsonl` (the ratio share) and `<out>.p2.jsonl`.
    Split {
        /// Input corpus: JSONL with {"id","tokens","slots","intent"} per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Fraction of intents assigned to the first partition, in (0, 1).
        #[arg(long, value_parser = parse_ratio)]
        ratio: f64,
        /// Shuffle seed for the intent assignment.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Path for the split spec JSON.
        #[arg(long)]
        out: PathBuf,
    },

    /// Segment every utterance and write span predictions as JSONL.
    Segment {
        /// Corpus to segment (gold slots, if present, are ignored).
        #[arg(long)]
        corpus: PathBuf,
        /// Trained encoder checkpoint (used by the upl baseline). Without it
        /// a fresh seeded encoder is initialized and a warning names the seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Tree depth whose frontier becomes the segmentation (0 = one span).
        #[arg(long)]
        depth: usize,
        /// Segmentation source.
        #[arg(long, value_enum)]
        baseline: BaselineArg,
        /// Directory of `<utterance id>.impact` files; bypasses the encoder.
        #[arg(long)]
        impact_dir: Option<PathBuf>,
        /// Path for the predictions JSONL.
        #[arg(long)]
        out: PathBuf,
    },

    /// Train the encoder with segment- and sentence-level contrastive losses.
    ///
    /// Writes `encoder.ckpt` (best validation epoch), `train_report.json`,
    /// and `manifest.json` into --out-dir.
    Train {
        /// Training split (JSONL corpus).
        #[arg(long)]
        train: PathBuf,
        /// Validation split (JSONL corpus) scored each epoch.
        #[arg(long)]
        valid: PathBuf,
        /// Flat `key = value` training config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Score span predictions against gold slot boundaries.
    ///
    /// Prints the metrics table (values x100) and writes the report JSON.
    Eval {
        /// Predictions JSONL produced by `segment`.
        #[arg(long)]
        pred: PathBuf,
        /// Corpus whose BIO slot tags provide the gold boundaries.
        #[arg(long)]
        gold_corpus: PathBuf,
        /// Path for the metrics JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also report the mean of per-utterance metrics (summed counts stay
        /// the primary view).
        #[arg(long = "macro")]
        macro_agg: bool,
    },

    /// Sweep segmentation depth on a validation split and pick the best.
    TuneDepth {
        /// Validation split (JSONL corpus with gold slots).
        #[arg(long)]
        valid: PathBuf,
        /// Trained encoder checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Smallest depth to try.
        #[arg(long)]
        dmin: usize,
        /// Largest depth to try (inclusive).
        #[arg(long)]
        dmax: usize,
    },

    /// Dump diagnostics for one utterance.
    Inspect {
        /// Corpus containing the utterance.
        #[arg(long)]
        corpus: PathBuf,
        /// Encoder checkpoint; omitted = fresh seeded encoder (with warning).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Id of the utterance to inspect.
        #[arg(long)]
        utterance_id: String,
        /// Which artifact to dump.
        #[arg(long, value_enum)]
        dump: DumpArg,
        /// Tree depth for tree/segsim dumps.
        #[arg(long, default_value_t = 3)]
        depth: usize,
        /// Output path for the dump.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        // Ignore the error if a global pool already exists (tests, repeats).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match commands::run(cli.command, cli.force) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
