//! `ipat`: command-line driver for the IPA transfer pipeline.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Multilingual IPA pretraining, adaptation and BPE finetuning for
/// low-resource speech recognition.
#[derive(Debug, Parser)]
#[command(name = "ipat", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic three-language corpus and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training utterances per high-resource language.
        #[arg(long, default_value_t = 2000)]
        high: usize,
        /// Training utterances of the low-resource language.
        #[arg(long, default_value_t = 100)]
        low: usize,
    },
    /// Resolve manifests and compute log-mel features for audio entries.
    Prepare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Add IPA transcripts to every manifest and write phone inventories.
    G2p {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a BPE model on one language's training transcripts.
    BpeTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lang: String,
    },
    /// Train the multilingual IPA model on the pooled pretraining languages.
    TrainIpa {
        #[arg(long)]
        config: PathBuf,
    },
    /// Adapt the IPA model to one language at a small constant learning rate.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lang: String,
        /// Stage directory holding the parent checkpoint.
        #[arg(long, default_value = "train-ipa")]
        parent: String,
    },
    /// Keep the IPA encoder, replace the decoder and train on BPE targets.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lang: String,
        /// Stage directory holding the parent checkpoint (`train-ipa` or `adapt-<lang>`).
        #[arg(long)]
        parent: Option<String>,
        /// Output stage name; defaults to `finetune-<lang>` or `finetune-<lang>-<parent>`.
        #[arg(long)]
        out: Option<String>,
    },
    /// Train the same architecture from scratch on one language.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lang: String,
    },
    /// Beam-search decode a split with a stage's checkpoint.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: String,
        /// Defaults to the language named in the checkpoint's provenance.
        #[arg(long)]
        lang: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score hypotheses against references (JSON lines with `id` and `text`).
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value = "word")]
        unit: String,
        /// Report file; the summary line always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract encoder frame embeddings at fixed frames.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: String,
        /// Comma-separated languages; defaults to the pretraining languages.
        #[arg(long)]
        langs: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        n_per_lang: Option<usize>,
    },
    /// Project embeddings to 2-D with t-SNE and write CSV and SVG.
    Tsne {
        #[arg(long)]
        input: PathBuf,
        /// Writes `<prefix>.csv` and `<prefix>.svg`.
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
