//! `dictag`: dictionary-augmented sequence labeling experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags,
//! missing inputs, spec schema violations). Failures are reported on stderr
//! as one JSON object.

mod commands;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::{MixtureArgs, TagArgs, UsageError};
use dictag::weaklabel::Fraction;

#[derive(Debug, Parser)]
#[command(name = "dictag", version, about = "Dictionary-augmented BiLSTM-CRF concept extraction")]
struct Cli {
    /// Worker threads for per-sequence, per-fold and per-cell parallelism
    /// (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model on corpora.train, selecting by corpora.dev if given.
    Train(SpecArgs),
    /// k-fold cross-validation over corpora.train.
    Cv(SpecArgs),
    /// Both baselines x six dictionary fractions, scored on every test tagging.
    Sweep(SpecArgs),
    /// Label a CoNLL corpus with a trained checkpoint.
    Tag(TagCmd),
    /// Weak-label a corpus with a (mixed) symptom dictionary.
    WeakLabel(WeakLabelCmd),
    /// Merge a fraction of a donor dictionary into a base dictionary.
    DictMerge(DictMergeCmd),
    /// Token-level per-label and macro metrics of predicted against gold.
    Eval(EvalCmd),
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// Experiment spec (TOML). Relative paths resolve against its data_root,
    /// else $DICTAG_DATA_ROOT, else the spec's directory.
    #[arg(long)]
    spec: PathBuf,
    /// Overrides every seed in the spec (model, batches, folds, mixtures).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec's output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TagCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CoNLL corpus; existing labels are replaced.
    #[arg(long)]
    input: PathBuf,
    /// Contextual store covering the input ids (BERT variant).
    #[arg(long)]
    contextual: Option<PathBuf>,
    /// Piece vocabulary (BERT variant); defaults to the training one.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Debug, Args)]
struct MixtureFlags {
    /// Base symptom dictionary (one term per line).
    #[arg(long)]
    base: PathBuf,
    /// Donor symptom dictionary; without it the base is used alone.
    #[arg(long)]
    donor: Option<PathBuf>,
    /// Share of the donor's extra terms: 0, 20, 40, 60, 80 or 100 (a `%`
    /// suffix or 0.0-1.0 ratios are accepted too).
    #[arg(long, default_value = "0", value_parser = parse_fraction)]
    fraction: Fraction,
    /// Shuffle seed for choosing donor terms.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop list applied to the base dictionary.
    #[arg(long)]
    prune_base: Option<PathBuf>,
    /// Drop list applied to the donor dictionary.
    #[arg(long)]
    prune_donor: Option<PathBuf>,
}

impl From<MixtureFlags> for MixtureArgs {
    fn from(f: MixtureFlags) -> Self {
        MixtureArgs {
            base: f.base,
            donor: f.donor,
            fraction: f.fraction,
            seed: f.seed,
            prune_base: f.prune_base,
            prune_donor: f.prune_donor,
        }
    }
}

fn parse_fraction(s: &str) -> Result<Fraction, String> {
    Fraction::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct WeakLabelCmd {
    #[command(flatten)]
    mixture: MixtureFlags,
    /// CoNLL corpus to tag; existing labels are replaced.
    #[arg(long)]
    input: PathBuf,
    /// Keep only sequences with at least one dictionary match.
    #[arg(long)]
    filter: bool,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Debug, Args)]
struct DictMergeCmd {
    #[command(flatten)]
    mixture: MixtureFlags,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvalCmd {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    predicted: PathBuf,
    /// Model name shown in the report (default: predicted file stem).
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    output_dir: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs as usize).build_global()?;
    }
    match cli.command {
        Command::Train(a) => commands::train(&a.spec, a.seed, a.output_dir),
        Command::Cv(a) => commands::cv(&a.spec, a.seed, a.output_dir),
        Command::Sweep(a) => commands::sweep(&a.spec, a.seed, a.output_dir),
        Command::Tag(a) => commands::tag(TagArgs {
            checkpoint: a.checkpoint,
            input: a.input,
            output_dir: a.output_dir,
            contextual: a.contextual,
            vocab: a.vocab,
        }),
        Command::WeakLabel(a) => commands::weak_label_cmd(a.mixture.into(), a.input, a.filter, a.output_dir),
        Command::DictMerge(a) => commands::dict_merge(a.mixture.into(), a.output_dir),
        Command::Eval(a) => commands::eval(a.gold, a.predicted, a.model, a.output_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let usage = err.downcast_ref::<UsageError>().is_some();
            let mut chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
            if usage {
                chain.remove(0);
            }
            let diagnostic = json!({
                "error": if usage { "usage" } else { "runtime" },
                "message": chain.first().cloned().unwrap_or_default(),
                "causes": chain.get(1..).unwrap_or_default(),
            });
            eprintln!("{diagnostic}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
