use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hotfix_core::data::{build_example, HotfixExample};
use hotfix_core::eval::{completion_tasks, format_change, Baseline, CompletionTask, EvalReport, EvalSuite};
use hotfix_core::hotfix::{train_adapter, HotfixOutcome, StepRecord};
use hotfix_core::loss::Objective;
use hotfix_core::model::{train_base, TrainBaseConfig, TransformerLM};
use hotfix_core::optim::{Adam, AdamConfig};
use hotfix_core::peft::{init_adapter, quantize_base, AdapterKind, AdapterSpec, AdapterState};
use hotfix_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::Corpus;

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn gen_corpus(seed: u64, pairs: usize, neutral: usize, out: &Path) -> Result<()> {
    crate::corpus::generate(seed, pairs, neutral, out)
}

/// Result of `train-base`.
pub struct TrainedBase {
    pub model: TransformerLM,
    pub fingerprint: u64,
    pub epoch_losses: Vec<f64>,
}

/// Base corpus: training neutral text plus the buggy version of every pair.
/// Fixed versions never appear.
pub fn base_corpus(corpus: &Corpus) -> Vec<Vec<usize>> {
    let mut seqs = corpus.encode_all(corpus.neutral_train());
    seqs.extend(corpus.pairs.iter().map(|p| corpus.tok.encode(&p.full_text(&p.buggy_stmt))));
    seqs
}

pub fn train_base_cmd(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<TrainedBase> {
    let corpus = Corpus::load(corpus_dir)?;
    if corpus.tok.len() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "model.vocab_size is {} but the corpus tokenizer has {} entries",
            cfg.model.vocab_size,
            corpus.tok.len()
        )));
    }
    let seqs: Vec<Vec<usize>> = base_corpus(&corpus)
        .into_iter()
        .map(|s| s[..s.len().min(cfg.model.context_len + 1)].to_vec())
        .collect();
    let mut model = TransformerLM::new(cfg.model.clone())?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.base_training.learning_rate))?;
    let tb = TrainBaseConfig {
        epochs: cfg.base_training.epochs,
        batch_size: cfg.base_training.batch_size,
        seed: cfg.base_training.seed,
    };
    let start = Instant::now();
    let losses = train_base(&mut model, &seqs, &tb, &mut opt, |e, l| {
        eprintln!("base epoch {e}: loss {l:.4} ({:.1}s)", start.elapsed().as_secs_f64());
    })?;
    model.set_trainable(false);

    ensure_parent(out)?;
    let fingerprint = checkpoint::save_base(out, &model)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{e},{l}");
    }
    fs::write(sibling(out, "loss.csv"), csv)?;
    cfg.write_beside(out)?;
    Ok(TrainedBase { model, fingerprint, epoch_losses: losses })
}

/// Hotfix training data drawn from a corpus.
pub struct HotfixData {
    pub train: Vec<HotfixExample>,
    pub validation: Vec<HotfixExample>,
    pub neutral: Vec<Vec<usize>>,
}

impl HotfixData {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let build = |split: &str| -> Result<Vec<HotfixExample>> {
            corpus.pairs_in(split)?.iter().map(|p| build_example(p, &corpus.tok)).collect()
        };
        Ok(HotfixData {
            train: build("train")?,
            validation: build("validation")?,
            neutral: corpus.encode_all(corpus.neutral_train()),
        })
    }
}

/// The model an adapter of `spec` runs on: the base itself, or a quantized
/// copy for QLoRA.
pub fn model_for(base: &TransformerLM, spec: &AdapterSpec) -> Result<TransformerLM> {
    if checkpoint::needs_quantized_base(spec.kind) {
        quantize_base(base, spec.quant_bits)
    } else {
        Ok(base.clone())
    }
}

/// Trains one adapter on `base` (fingerprint `base_fp`). `resume` continues
/// from an existing adapter instead of a fresh one.
pub fn fit_adapter(
    cfg: &RunConfig,
    base: &TransformerLM,
    base_fp: u64,
    data: &HotfixData,
    resume: Option<AdapterState>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(AdapterState, HotfixOutcome)> {
    let model = model_for(base, &cfg.adapter)?;
    let mut adapter = match resume {
        Some(a) => {
            a.check_base(base_fp)?;
            if a.spec != cfg.adapter {
                return Err(Error::Compatibility("resumed adapter has a different adapter spec than the config".into()));
            }
            a
        }
        None => init_adapter(&cfg.adapter, &model.config, cfg.training.seed)?.with_fingerprint(base_fp),
    };
    let label = format!("{} {}", cfg.adapter.kind.name(), cfg.objective);
    let outcome = train_adapter(
        &model,
        &mut adapter,
        &data.train,
        &data.validation,
        &data.neutral,
        &cfg.hotfix_config(),
        &mut on_step,
        |e| {
            let val = e.validation_dual.map(|v| format!(", validation dual {v:.4}")).unwrap_or_default();
            eprintln!("{label} epoch {}: loss {:.4}{val} ({:.1}s)", e.epoch, e.train.l_total, e.seconds);
        },
    )?;
    Ok((adapter, outcome))
}

pub fn hotfix_cmd(
    cfg: &RunConfig,
    corpus_dir: &Path,
    base_path: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(AdapterState, HotfixOutcome)> {
    let corpus = Corpus::load(corpus_dir)?;
    let (base, fp) = checkpoint::load_base(base_path)?;
    let resumed = match resume {
        Some(p) => Some(checkpoint::load_adapter(p, &base.config, fp)?),
        None => None,
    };
    let data = HotfixData::from_corpus(&corpus)?;
    let mut csv = format!("{}\n", StepRecord::CSV_HEADER);
    let (adapter, outcome) = fit_adapter(cfg, &base, fp, &data, resumed, |s| {
        csv.push_str(&s.csv_row());
        csv.push('\n');
    })?;
    ensure_parent(out)?;
    checkpoint::save_adapter(out, &adapter)?;
    fs::write(sibling(out, "steps.csv"), csv)?;
    cfg.write_beside(out)?;
    Ok((adapter, outcome))
}

/// Everything evaluation needs besides the models.
pub struct EvalData {
    pub corpus: Corpus,
    pub pairs: Vec<hotfix_core::data::CodePair>,
    pub heldout: Vec<Vec<usize>>,
    pub tasks: Vec<CompletionTask>,
}

impl EvalData {
    pub fn new(corpus: Corpus, split: &str, context_len: usize) -> Result<Self> {
        let pairs = corpus.pairs_in(split)?;
        let heldout = corpus
            .encode_all(corpus.neutral_heldout())
            .into_iter()
            .map(|s| s[..s.len().min(context_len)].to_vec())
            .collect();
        let tasks = completion_tasks(&corpus.tok, corpus.neutral_heldout());
        Ok(EvalData { corpus, pairs, heldout, tasks })
    }

    pub fn suite(&self, cfg: &RunConfig) -> Result<EvalSuite<'_>> {
        let stop = self
            .corpus
            .tok
            .id(&cfg.eval.stop)
            .ok_or_else(|| Error::Config(format!("eval.stop {:?} is not in the tokenizer vocabulary", cfg.eval.stop)))?;
        Ok(EvalSuite {
            tok: &self.corpus.tok,
            test_pairs: &self.pairs,
            heldout: &self.heldout,
            tasks: &self.tasks,
            sampler: hotfix_core::infer::SamplerConfig { stop_token: Some(stop), ..cfg.sampler.clone() },
            ks: cfg.eval.ks.clone(),
        })
    }
}

fn write_report(dir: &Path, stem: &str, json: &str, md: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.json")), json)?;
    fs::write(dir.join(format!("{stem}.md")), md)?;
    Ok(())
}

/// Evaluates the base alone ("before") against base + adapter ("after").
/// Without an adapter both sides are the base model.
pub fn evaluate_cmd(
    cfg: &RunConfig,
    corpus_dir: &Path,
    base_path: &Path,
    adapter_path: Option<&Path>,
    out_dir: &Path,
) -> Result<EvalReport> {
    let (base, fp) = checkpoint::load_base(base_path)?;
    let adapter = match adapter_path {
        Some(p) => Some(checkpoint::load_adapter(p, &base.config, fp)?),
        None => None,
    };
    let data = EvalData::new(Corpus::load(corpus_dir)?, &cfg.eval.split, base.config.context_len)?;
    let suite = data.suite(cfg)?;
    let before = suite.measure(&base, None)?;
    let (label, after) = match &adapter {
        Some(a) => {
            let model = model_for(&base, &a.spec)?;
            (a.spec.kind.name().to_string(), suite.measure(&model, Some(a))?)
        }
        None => ("base".to_string(), before.clone()),
    };
    let report = suite.report(&label, &before, &after)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_report(out_dir, "report", &json, &report.table())?;
    Ok(report)
}

/// One adapter × objective run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub adapter: AdapterKind,
    pub objective: Objective,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Relative change that adding KL makes to one count, for one objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlDelta {
    pub objective: Objective,
    pub bugs: Option<f64>,
    pub fixes: Option<f64>,
}

/// Per-adapter "Changes by KL" summary: the mean of the per-objective deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlSummary {
    pub adapter: AdapterKind,
    pub deltas: Vec<KlDelta>,
    pub mean_bugs: Option<f64>,
    pub mean_fixes: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub base: hotfix_core::eval::OutcomeCounts,
    pub base_ppl: f64,
    pub adapters: Vec<AdapterKind>,
    pub objectives: Vec<Objective>,
    /// Row-major: adapters outer, objectives inner.
    pub cells: Vec<SweepCell>,
    pub changes_by_kl: Vec<KlSummary>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Signed relative change in percent, `None` for a zero reference.
fn rel(without: usize, with: usize) -> Option<f64> {
    hotfix_core::eval::percent_change(without, with).ok()
}

impl SweepReport {
    pub fn cell(&self, adapter: AdapterKind, objective: Objective) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.adapter == adapter && c.objective == objective)
    }

    fn summarize_kl(&mut self) {
        self.changes_by_kl = self
            .adapters
            .iter()
            .map(|&adapter| {
                let counts = |o: Objective| self.cell(adapter, o).and_then(|c| c.report.as_ref()).map(|r| r.after);
                let deltas: Vec<KlDelta> = self
                    .objectives
                    .iter()
                    .filter(|o| o.uses_kl() && self.objectives.contains(&o.without_kl()))
                    .filter_map(|&o| {
                        let (with, without) = (counts(o)?, counts(o.without_kl())?);
                        Some(KlDelta {
                            objective: o,
                            bugs: rel(without.n_buggy, with.n_buggy),
                            fixes: rel(without.n_fixed, with.n_fixed),
                        })
                    })
                    .collect();
                KlSummary {
                    adapter,
                    mean_bugs: mean(deltas.iter().filter_map(|d| d.bugs)),
                    mean_fixes: mean(deltas.iter().filter_map(|d| d.fixes)),
                    deltas,
                }
            })
            .collect();
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let cell_text = |c: Option<&SweepCell>, f: &dyn Fn(&EvalReport) -> String| match c {
            Some(SweepCell { report: Some(r), .. }) => f(r),
            Some(SweepCell { error: Some(_), .. }) => "failed".to_string(),
            _ => "-".to_string(),
        };
        let pct = |count: usize, p: Option<f64>| match p {
            Some(p) => format!("{count} ({})", format_change(p)),
            None => format!("{count} (n/a)"),
        };
        let _ = writeln!(s, "Base model: {} bugs, {} fixes, perplexity {:.2}\n", self.base.n_buggy, self.base.n_fixed, self.base_ppl);
        let mut header = String::from("| Adapter | Count |");
        let mut rule = String::from("|---|---|");
        for o in &self.objectives {
            let _ = write!(header, " {o} |");
            rule.push_str("---|");
        }
        header.push_str(" Changes by KL |");
        rule.push_str("---|");
        let _ = writeln!(s, "{header}\n{rule}");
        for (a, summary) in self.adapters.iter().zip(&self.changes_by_kl) {
            for (row, is_bugs) in [("# Bugs", true), ("# Fixes", false)] {
                let _ = write!(s, "| {} | {row} |", a.name());
                for &o in &self.objectives {
                    let text = cell_text(self.cell(*a, o), &|r| {
                        if is_bugs {
                            pct(r.after.n_buggy, r.pct_change_bugs)
                        } else {
                            pct(r.after.n_fixed, r.pct_change_fixes)
                        }
                    });
                    let _ = write!(s, " {text} |");
                }
                let m = if is_bugs { summary.mean_bugs } else { summary.mean_fixes };
                let _ = writeln!(s, " {} |", m.map(format_change).unwrap_or_else(|| "-".into()));
            }
            let _ = write!(s, "| {} | Perplexity |", a.name());
            for &o in &self.objectives {
                let _ = write!(s, " {} |", cell_text(self.cell(*a, o), &|r| format!("{:.2}", r.ppl_after)));
            }
            let _ = writeln!(s, " |");
        }
        let failed: Vec<&SweepCell> = self.cells.iter().filter(|c| c.error.is_some()).collect();
        if !failed.is_empty() {
            let _ = writeln!(s, "\nFailed cells:");
            for c in failed {
                let _ = writeln!(s, "- {} {}: {}", c.adapter.name(), c.objective, c.error.as_deref().unwrap_or(""));
            }
        }
        s
    }
}

/// Trains and evaluates every adapter × objective cell against one base.
/// A failing cell is recorded and the sweep continues.
pub fn sweep(
    cfg: &RunConfig,
    corpus_dir: &Path,
    base_path: &Path,
    adapters: &[AdapterKind],
    objectives: &[Objective],
    out_dir: &Path,
) -> Result<SweepReport> {
    if adapters.is_empty() || objectives.is_empty() {
        return Err(Error::Config("sweep needs at least one adapter and one objective".into()));
    }
    let (base, fp) = checkpoint::load_base(base_path)?;
    let corpus = Corpus::load(corpus_dir)?;
    let data = HotfixData::from_corpus(&corpus)?;
    let eval = EvalData::new(corpus, &cfg.eval.split, base.config.context_len)?;
    let suite = eval.suite(cfg)?;
    let before = suite.measure(&base, None)?;
    let mut cells = Vec::new();
    for &kind in adapters {
        for &objective in objectives {
            let mut cell_cfg = cfg.clone();
            cell_cfg.adapter.kind = kind;
            cell_cfg.objective = objective;
            let result = run_cell(&cell_cfg, &base, fp, &data, &suite, &before);
            if let Err(e) = &result {
                eprintln!("sweep cell {} {objective} failed: {e}", kind.name());
            }
            let (report, error) = match result {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(SweepCell { adapter: kind, objective, report, error });
        }
    }
    let mut report = SweepReport {
        base: before.counts,
        base_ppl: before.ppl,
        adapters: adapters.to_vec(),
        objectives: objectives.to_vec(),
        cells,
        changes_by_kl: Vec::new(),
    };
    report.summarize_kl();
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_report(out_dir, "sweep", &json, &report.table())?;
    Ok(report)
}

fn run_cell(
    cfg: &RunConfig,
    base: &TransformerLM,
    fp: u64,
    data: &HotfixData,
    suite: &EvalSuite<'_>,
    before: &Baseline,
) -> Result<EvalReport> {
    cfg.adapter.validate(&cfg.model)?;
    let (adapter, _) = fit_adapter(cfg, base, fp, data, None, |_| {})?;
    let model = model_for(base, &adapter.spec)?;
    let after = suite.measure(&model, Some(&adapter))?;
    suite.report(&format!("{} {}", cfg.adapter.kind.name(), cfg.objective), before, &after)
}

/// Flushes stderr so epoch timings interleave sensibly with other output.
pub fn flush_stderr() {
    let _ = std::io::stderr().flush();
}

#[cfg(test)]
mod tests {
    use super::*;
    use hotfix_core::eval::OutcomeCounts;

    fn counts(b: usize, f: usize) -> OutcomeCounts {
        OutcomeCounts { n_prompts: 10, samples_per_prompt: 10, n_buggy: b, n_fixed: f, n_neither: 100 - b - f }
    }

    fn report(b: usize, f: usize) -> EvalReport {
        EvalReport {
            label: String::new(),
            before: counts(50, 10),
            after: counts(b, f),
            pct_change_bugs: rel(50, b),
            pct_change_fixes: rel(10, f),
            ppl_before: 2.0,
            ppl_after: 2.5,
            pass_at_k: vec![],
            wilcoxon: None,
            wilcoxon_note: None,
        }
    }

    #[test]
    fn changes_by_kl_is_the_mean_of_cell_deltas() {
        let objectives = Objective::ALL.to_vec();
        let after = [(40, 20), (30, 30), (20, 40), (44, 21), (30, 33), (19, 40)];
        let mut cells: Vec<SweepCell> = objectives
            .iter()
            .zip(after)
            .map(|(&o, (b, f))| SweepCell { adapter: AdapterKind::Lora, objective: o, report: Some(report(b, f)), error: None })
            .collect();
        cells.extend(objectives.iter().map(|&o| SweepCell {
            adapter: AdapterKind::Ia3,
            objective: o,
            report: None,
            error: Some("boom".into()),
        }));
        let mut r = SweepReport {
            base: counts(50, 10),
            base_ppl: 2.0,
            adapters: vec![AdapterKind::Lora, AdapterKind::Ia3],
            objectives,
            cells,
            changes_by_kl: vec![],
        };
        r.summarize_kl();
        let lora = &r.changes_by_kl[0];
        assert_eq!(lora.deltas.len(), 3);
        // Bugs: +10%, 0%, -5%; fixes: +5%, +10%, 0%.
        assert!((lora.mean_bugs.unwrap() - 5.0 / 3.0).abs() < 1e-12);
        assert!((lora.mean_fixes.unwrap() - 5.0).abs() < 1e-12);
        assert!(r.changes_by_kl[1].deltas.is_empty());
        assert_eq!(r.changes_by_kl[1].mean_bugs, None);
        let t = r.table();
        assert!(t.contains("failed"));
        assert!(t.contains("Changes by KL"));
        assert_eq!(t.lines().filter(|l| l.starts_with("| ")).count(), 1 + 2 * 3);
    }
}
