mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tracing::info;

use commands::{DecontamArgs, FitArgs};
use config::{RunConfig, UsageError};
use dsrag::consistency::TaskKind;
use dsrag::decontam::MULTIPLE_CHOICE_NGRAM;
use dsrag::evalharness::Strategy;

#[derive(Parser)]
#[command(name = "dsrag", version, about = "Retrieval over pre-training corpora: indexing, decontamination, evaluation and compute-multiplier fits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    shards: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(c) = &self.corpus {
            cfg.corpus = Some(c.clone());
        }
        if let Some(s) = &self.shards {
            cfg.shards = Some(s.clone());
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Embed a corpus into per-dataset shards with a manifest.
    BuildIndex {
        #[command(flatten)]
        common: Common,
        /// Output directory for shards and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Documents per shard.
        #[arg(long)]
        shard_size: Option<usize>,
    },
    /// Drop corpus documents sharing an n-gram with a test set.
    Decontaminate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        test_set: Option<PathBuf>,
        /// Cleaned corpus output.
        #[arg(long)]
        out: PathBuf,
        /// Report output (JSON).
        #[arg(long)]
        report: PathBuf,
        #[arg(long, short = 'n', default_value_t = MULTIPLE_CHOICE_NGRAM)]
        ngram: usize,
        /// Use the math window (26 tokens); overrides --ngram.
        #[arg(long)]
        math: bool,
        /// Add answer options to the filtered text.
        #[arg(long)]
        include_choices: bool,
    },
    /// Retrieve documents for one query and print the result as JSON.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        query: String,
    },
    /// Evaluate a strategy on a test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        test_set: Option<PathBuf>,
        #[arg(long)]
        task_kind: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_trials: Option<usize>,
        #[arg(long)]
        n_per_doc: Option<usize>,
        /// Repeat with seeds seed..seed+runs and report mean accuracy.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Fit an accuracy-vs-compute curve and compute multipliers.
    Fit {
        /// CSV with flops,accuracy,label columns.
        #[arg(long)]
        points: PathBuf,
        #[arg(long, default_value = "baseline")]
        baseline_label: String,
        /// Accuracy bounds from the shipped table (STEM, Humanities, Social, Other, All).
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        ymin: Option<f64>,
        #[arg(long)]
        ymax: Option<f64>,
        /// Use this slope instead of fitting (needs --midpoint, log10 FLOPs).
        #[arg(long)]
        slope: Option<f64>,
        #[arg(long)]
        midpoint: Option<f64>,
        /// Directory for fit.json, curve.csv and multipliers.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize eval reports side by side.
    Report {
        /// report.json files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// fit.json whose curve converts accuracies into compute multipliers.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::BuildIndex { common, out, shard_size } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = shard_size {
                cfg.shard_size = s;
            }
            let m = commands::build_index(&cfg, &out)?;
            let hash = dsrag_hash(&std::fs::read(out.join(commands::MANIFEST))?);
            info!(shards = m.shards.len(), documents = m.documents, manifest_sha256 = %hash, "index built");
            println!("{} shards, {} documents, manifest sha256 {hash}", m.shards.len(), m.documents);
        }
        Command::Decontaminate {
            corpus,
            test_set,
            out,
            report,
            ngram,
            math,
            include_choices,
        } => {
            let args = DecontamArgs {
                corpus,
                test_set,
                out,
                report,
                ngram: if math { commands::MATH_PRESET } else { ngram },
                include_choices,
            };
            let r = commands::decontaminate_cmd(&args)?;
            info!(scanned = r.scanned, dropped = r.dropped, ngram = r.ngram, "decontaminated");
            println!("scanned {} dropped {} (ngram {})", r.scanned, r.dropped, r.ngram);
        }
        Command::Retrieve { common, query } => {
            let mut cfg = common.resolve()?;
            commands::resolve_template(&mut cfg)?;
            let r = commands::retrieve_cmd(&cfg, &query)?;
            serde_json::to_writer_pretty(&mut stdout, &r)?;
            println!();
        }
        Command::Eval {
            common,
            test_set,
            task_kind,
            strategy,
            run_dir,
            seed,
            n_trials,
            n_per_doc,
            runs,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(t) = test_set {
                cfg.test_set = Some(t);
            }
            if let Some(k) = task_kind {
                cfg.task_kind = Some(
                    serde_json::from_value::<TaskKind>(serde_json::Value::String(k.clone()))
                        .map_err(|_| UsageError(format!("unknown task kind {k:?}")))?,
                );
            }
            if let Some(s) = strategy {
                cfg.strategy.strategy = s.parse::<Strategy>().map_err(|e| UsageError(e.to_string()))?;
            }
            if let Some(d) = run_dir {
                cfg.run_dir = Some(d);
            }
            if let Some(s) = seed {
                cfg.strategy.seed = s;
            }
            if let Some(n) = n_trials {
                cfg.strategy.n_trials = n;
            }
            if let Some(n) = n_per_doc {
                cfg.strategy.n_per_doc = n;
            }
            if let Some(r) = runs {
                cfg.runs = r;
            }
            commands::resolve_template(&mut cfg)?;
            let report = commands::eval_cmd(&cfg)?;
            println!(
                "{}: {} tasks, macro {:.4}, micro {:.4}",
                report.strategy, report.tasks, report.macro_accuracy, report.micro_accuracy
            );
        }
        Command::Fit {
            points,
            baseline_label,
            category,
            ymin,
            ymax,
            slope,
            midpoint,
            out,
        } => {
            let fit = commands::fit_cmd(&FitArgs {
                points,
                baseline_label,
                category,
                ymin,
                ymax,
                slope,
                midpoint,
                out,
            })?;
            commands::print_fit(&fit, &mut stdout)?;
        }
        Command::Report { reports, curve, csv } => {
            let rows = commands::report_cmd(&reports, curve.as_deref())?;
            commands::print_report_rows(&rows, &mut stdout)?;
            if let Some(p) = csv {
                commands::write_report_csv(&rows, &p)?;
            }
        }
    }
    Ok(())
}

fn dsrag_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.downcast_ref::<UsageError>().is_some();
            tracing::error!(error = %format!("{e:#}"), "command failed");
            eprintln!("error: {e:#}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
