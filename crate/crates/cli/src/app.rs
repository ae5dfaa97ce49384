//! The `hotfix` command line: argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use hotfix_core::loss::Objective;
use hotfix_core::peft::AdapterKind;

use crate::commands;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "hotfix", version, about = "Train and evaluate parameter-efficient hotfixes for small code models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; every field is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set training.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Corpus directory (paths.corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

impl Common {
    fn load(&self, mut extra: Vec<String>) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(c) = &self.corpus {
            overrides.push(path_override("paths.corpus", c));
        }
        overrides.append(&mut extra);
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

fn path_override(key: &str, p: &std::path::Path) -> String {
    format!("{key}={}", serde_json::Value::String(p.display().to_string()))
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic bug/fix corpus, its 8:1:1 split and a tokenizer.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        neutral: Option<usize>,
        /// Output directory (paths.corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base model on neutral text and the buggy version of every pair.
    TrainBase {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to write (paths.base).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train an adapter against a frozen base checkpoint.
    Hotfix {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint (paths.base).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Adapter file to write (paths.adapter).
        #[arg(long)]
        out: Option<PathBuf>,
        /// vanilla, guided, dual, or any of them with +KL.
        #[arg(long)]
        objective: Option<Objective>,
        /// lora, ia3, prefix or qlora.
        #[arg(long, value_parser = parse_kind)]
        adapter: Option<AdapterKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue training an existing adapter file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare the base model with base + adapter and write report.json/report.md.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Adapter to evaluate; without it the base is compared with itself.
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// train, validation or test (eval.split).
        #[arg(long)]
        split: Option<String>,
        /// Report directory (paths.report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every adapter × objective combination.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "lora", value_parser = parse_kind)]
        adapters: Vec<AdapterKind>,
        #[arg(long, value_delimiter = ',', default_value = "vanilla,guided,dual,vanilla+kl,guided+kl,dual+kl")]
        objectives: Vec<Objective>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<AdapterKind, String> {
    AdapterKind::parse(s).map_err(|e| e.to_string())
}

fn opt<T: std::fmt::Display>(key: &str, v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}={v}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { common, seed, pairs, neutral, out } => {
            let mut extra: Vec<String> =
                [opt("corpus.seed", &seed), opt("corpus.pairs", &pairs), opt("corpus.neutral", &neutral)].into_iter().flatten().collect();
            extra.extend(out.as_deref().map(|p| path_override("paths.corpus", p)));
            let cfg = common.load(extra)?;
            commands::gen_corpus(cfg.corpus.seed, cfg.corpus.pairs, cfg.corpus.neutral, &cfg.paths.corpus)?;
            println!("wrote corpus to {}", cfg.paths.corpus.display());
        }
        Command::TrainBase { common, out, epochs } => {
            let mut extra: Vec<String> = opt("base_training.epochs", &epochs).into_iter().collect();
            extra.extend(out.as_deref().map(|p| path_override("paths.base", p)));
            let cfg = common.load(extra)?;
            let trained = commands::train_base_cmd(&cfg, &cfg.paths.corpus, &cfg.paths.base)?;
            println!(
                "wrote {} (fingerprint {}, final loss {:.4})",
                cfg.paths.base.display(),
                crate::checkpoint::fingerprint_hex(trained.fingerprint),
                trained.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Hotfix { common, base, out, objective, adapter, epochs, lr, seed, resume } => {
            let mut extra: Vec<String> = [
                opt("objective", &objective.map(|o| serde_json::Value::String(o.name().into()))),
                opt("adapter.kind", &adapter.map(|k| serde_json::Value::String(k.name().to_ascii_lowercase()))),
                opt("training.epochs", &epochs),
                opt("training.learning_rate", &lr),
                opt("training.seed", &seed),
            ]
            .into_iter()
            .flatten()
            .collect();
            extra.extend(base.as_deref().map(|p| path_override("paths.base", p)));
            extra.extend(out.as_deref().map(|p| path_override("paths.adapter", p)));
            let cfg = common.load(extra)?;
            let (_, outcome) =
                commands::hotfix_cmd(&cfg, &cfg.paths.corpus, &cfg.paths.base, &cfg.paths.adapter, resume.as_deref())?;
            println!(
                "wrote {} after {} epochs (kept epoch {})",
                cfg.paths.adapter.display(),
                outcome.epochs.len(),
                outcome.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into())
            );
        }
        Command::Evaluate { common, base, adapter, split, out } => {
            let mut extra: Vec<String> =
                opt("eval.split", &split.map(serde_json::Value::String)).into_iter().collect();
            extra.extend(base.as_deref().map(|p| path_override("paths.base", p)));
            extra.extend(out.as_deref().map(|p| path_override("paths.report", p)));
            let cfg = common.load(extra)?;
            let report =
                commands::evaluate_cmd(&cfg, &cfg.paths.corpus, &cfg.paths.base, adapter.as_deref(), &cfg.paths.report)?;
            print!("{}", report.table());
        }
        Command::Sweep { common, base, adapters, objectives, out } => {
            let mut extra: Vec<String> = base.as_deref().map(|p| path_override("paths.base", p)).into_iter().collect();
            extra.extend(out.as_deref().map(|p| path_override("paths.report", p)));
            let cfg = common.load(extra)?;
            let report = commands::sweep(&cfg, &cfg.paths.corpus, &cfg.paths.base, &adapters, &objectives, &cfg.paths.report)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            crate::exit_code(&e)
        }
    }
}
