//! Command-line orchestration: configuration, artifacts, reports and charts.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod report;
pub mod svg;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// Bad configuration or arguments; the binary exits with status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cleancoder", version, about = "Spectrogram denoising frontend and desk-scale ASR pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the paired noisy/clean corpus and its manifests.
    GenCorpus {
        /// Experiment config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone ASR on clean speech.
    Pretrain {
        /// Experiment config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory written by `gen-corpus`.
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoising frontend on top of a frozen backbone encoder.
    TrainFrontend {
        /// Experiment config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory written by `gen-corpus`.
        #[arg(long)]
        corpus: PathBuf,
        /// Backbone checkpoint from `pretrain`.
        #[arg(long)]
        backbone: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an ASR model from scratch, optionally on frontend outputs.
    TrainAsr {
        /// Experiment config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory written by `gen-corpus`.
        #[arg(long)]
        corpus: PathBuf,
        /// Frontend checkpoint from `train-frontend`.
        #[arg(long)]
        frontend: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Spectrogram MAE of noisy and denoised audio against the clean reference.
    EvalMae {
        /// Frontend checkpoint from `train-frontend`.
        #[arg(long)]
        frontend: PathBuf,
        #[command(flatten)]
        source: ManifestSource,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy WER of an ASR model, with and without a frontend.
    EvalWer {
        /// ASR checkpoint from `pretrain` or `train-asr`.
        #[arg(long)]
        asr: PathBuf,
        /// Frontend checkpoint from `train-frontend`.
        #[arg(long)]
        frontend: Option<PathBuf>,
        #[command(flatten)]
        source: ManifestSource,
        /// Decode the clean side of each pair instead of the noisy one.
        #[arg(long)]
        clean: bool,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Line chart of validation CTC loss and WER from metric logs.
    PlotCurves {
        /// Metric logs, one series each, in the given order.
        #[arg(long, num_args = 1..)]
        logs: Vec<PathBuf>,
        /// SVG file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Either an explicit manifest or a corpus directory whose `eval.split`
/// manifest is used.
#[derive(Debug, clap::Args)]
pub struct ManifestSource {
    /// JSONL manifest to evaluate.
    #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
    pub manifest: Option<PathBuf>,
    /// Corpus directory; the split comes from `eval.split`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Experiment config read with `--corpus` to pick the split.
    #[arg(long, requires = "corpus")]
    pub config: Option<PathBuf>,
}

impl ManifestSource {
    pub fn resolve(&self) -> Result<PathBuf, UsageError> {
        match (&self.manifest, &self.corpus) {
            (Some(m), _) => Ok(m.clone()),
            (None, Some(c)) => Ok(cleancoder_core::corpus::manifest_path(c, &config(&self.config)?.eval.split)),
            (None, None) => Err(UsageError("give --manifest or --corpus".into())),
        }
    }
}

fn config(path: &Option<PathBuf>) -> Result<config::ExperimentConfig, UsageError> {
    match path {
        Some(p) => config::ExperimentConfig::load(p),
        None => Ok(config::ExperimentConfig::default()),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::GenCorpus { config: c, out } => gen_corpus(&config(&c)?, &out),
        Command::Pretrain { config: c, corpus, out } => pretrain(&config(&c)?, &corpus, &out),
        Command::TrainFrontend { config: c, corpus, backbone, out } => {
            train_frontend_cmd(&config(&c)?, &corpus, &backbone, &out)
        }
        Command::TrainAsr { config: c, corpus, frontend, out } => {
            train_asr_cmd(&config(&c)?, &corpus, frontend.as_deref(), &out)
        }
        Command::EvalMae { frontend, source, out } => eval_mae(&frontend, &source.resolve()?, &out),
        Command::EvalWer { asr, frontend, source, clean, out } => {
            eval_wer(&asr, frontend.as_deref(), &source.resolve()?, clean, &out)
        }
        Command::PlotCurves { logs, out } => plot_curves(&logs, &out),
    }
}

/// Exit status for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}
