//! Outcome counting, perplexity, pass@k, the Wilcoxon signed-rank test and
//! the report that ties them together.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::tokenizer::split;
use crate::data::{CodePair, Tokenizer};
use crate::error::{Error, Result};
use crate::fnv::fnv1a64;
use crate::infer::{generate_prepared, Prepared, SamplerConfig};
use crate::model::TransformerLM;
use crate::peft::AdapterState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Buggy,
    Fixed,
    Neither,
}

fn contains_units(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Token-normalized containment. A sample holding both statements counts as
/// fixed.
pub fn classify_output(generated: &str, buggy_stmt: &str, fixed_stmt: &str) -> Outcome {
    let hay = split(generated);
    if contains_units(&hay, &split(fixed_stmt)) {
        Outcome::Fixed
    } else if contains_units(&hay, &split(buggy_stmt)) {
        Outcome::Buggy
    } else {
        Outcome::Neither
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub n_prompts: usize,
    pub samples_per_prompt: usize,
    pub n_buggy: usize,
    pub n_fixed: usize,
    pub n_neither: usize,
}

impl OutcomeCounts {
    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Buggy => self.n_buggy += 1,
            Outcome::Fixed => self.n_fixed += 1,
            Outcome::Neither => self.n_neither += 1,
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.n_buggy + self.n_fixed + self.n_neither == self.n_prompts * self.samples_per_prompt
    }
}

/// Sampler seed for one prompt, independent of prompt order.
pub fn prompt_seed(seed: u64, pair_id: &str) -> u64 {
    seed ^ fnv1a64(pair_id.as_bytes())
}

/// Samples `sampler.num_samples` continuations of each pair's context and
/// classifies the generated part of each.
pub fn count_outcomes(
    model: &TransformerLM,
    adapter: Option<&AdapterState>,
    tok: &Tokenizer,
    pairs: &[CodePair],
    sampler: &SamplerConfig,
) -> Result<OutcomeCounts> {
    let prepared = Prepared::new(model, adapter)?;
    let mut counts = OutcomeCounts { samples_per_prompt: sampler.num_samples, ..Default::default() };
    for pair in pairs {
        let prompt = tok.encode(&pair.context);
        let cfg = SamplerConfig { rng_seed: prompt_seed(sampler.rng_seed, &pair.pair_id), ..sampler.clone() };
        for seq in generate_prepared(&prepared, &prompt, &cfg)? {
            counts.add(classify_output(&tok.decode(&seq[prompt.len()..]), &pair.buggy_stmt, &pair.fixed_stmt));
        }
        counts.n_prompts += 1;
    }
    Ok(counts)
}

/// `exp` of the mean next-token NLL pooled over every prediction of every
/// sequence. Sequences shorter than 2 tokens contribute nothing.
pub fn perplexity(model: &TransformerLM, adapter: Option<&AdapterState>, corpus: &[Vec<usize>]) -> Result<f64> {
    let v = model.config.vocab_size;
    let (mut nll, mut count) = (0.0, 0usize);
    for seq in corpus.iter().filter(|s| s.len() >= 2) {
        let lp = model.log_probs(&seq[..seq.len() - 1], adapter)?;
        for (t, &target) in seq[1..].iter().enumerate() {
            nll -= lp[t * v + target];
        }
        count += seq.len() - 1;
    }
    if count == 0 {
        return Err(Error::Input("perplexity needs at least one predicted token".into()));
    }
    Ok((nll / count as f64).exp())
}

/// Unbiased pass@k, `1 − C(n−c, k)/C(n, k)`, as a running product.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(Error::Input(format!("pass@k: c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::Input(format!("pass@k: k = {k} must be in 1..={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut miss = 1.0;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

/// Result of a two-sided Wilcoxon signed-rank test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub exact: bool,
}

/// Differences and rank ties closer than this (relative) are treated as equal.
const TIE_EPS: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_EPS * a.abs().max(b.abs()).max(1.0)
}

/// Largest `n_effective` evaluated by exact enumeration.
pub const EXACT_MAX_N: usize = 12;

pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<Wilcoxon> {
    if x.len() != y.len() {
        return Err(Error::Input(format!("wilcoxon: lengths {} and {} differ", x.len(), y.len())));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| !close(*d, 0.0)).collect();
    let n = d.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!("wilcoxon: {n} nonzero differences, need at least 5")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && close(d[order[j]].abs(), d[order[i]].abs()) {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let w_plus: f64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| ranks[k]).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);
    let dev = (w_plus - total / 2.0).abs();
    let (p_value, exact) = if n <= EXACT_MAX_N {
        let mut extreme = 0u64;
        for mask in 0u32..(1 << n) {
            let w: f64 = (0..n).filter(|&k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
            if (w - total / 2.0).abs() >= dev - TIE_EPS * total {
                extreme += 1;
            }
        }
        (extreme as f64 / (1u64 << n) as f64, true)
    } else {
        let nf = n as f64;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = dev / var.sqrt();
        (libm::erfc(z / std::f64::consts::SQRT_2), false)
    };
    Ok(Wilcoxon { statistic, p_value: p_value.min(1.0), n_effective: n, exact })
}

/// `(after − before) / before × 100`.
pub fn percent_change(before: usize, after: usize) -> Result<f64> {
    if before == 0 {
        return Err(Error::UndefinedBaseline);
    }
    Ok((after as f64 - before as f64) / before as f64 * 100.0)
}

/// Two-decimal percentage with a direction marker, e.g. `↓44.31%`.
pub fn format_change(pct: f64) -> String {
    let s = format!("{:.2}", pct.abs());
    if s == "0.00" {
        "0.00%".to_string()
    } else if pct < 0.0 {
        format!("↓{s}%")
    } else {
        format!("↑{s}%")
    }
}

/// Prompt and expected continuation for one completion task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionTask {
    pub id: String,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

/// One task per text: the prompt is everything up to and including the
/// second-to-last `;`, the target the final statement. Texts with fewer
/// than two statements are skipped.
pub fn completion_tasks(tok: &Tokenizer, texts: &[String]) -> Vec<CompletionTask> {
    let Some(semi) = tok.id(";") else { return Vec::new() };
    texts
        .iter()
        .enumerate()
        .filter_map(|(i, text)| {
            let ids = tok.encode(text);
            let ends: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == semi).map(|(p, _)| p).collect();
            if ends.len() < 2 || *ends.last()? != ids.len() - 1 {
                return None;
            }
            let cut = ends[ends.len() - 2] + 1;
            Some(CompletionTask { id: format!("task-{i}"), prompt: ids[..cut].to_vec(), target: ids[cut..].to_vec() })
        })
        .collect()
}

/// Number of exactly correct continuations out of `sampler.num_samples`
/// for each task.
pub fn task_correct_counts(
    model: &TransformerLM,
    adapter: Option<&AdapterState>,
    tasks: &[CompletionTask],
    sampler: &SamplerConfig,
) -> Result<Vec<usize>> {
    let prepared = Prepared::new(model, adapter)?;
    tasks
        .iter()
        .map(|task| {
            let cfg = SamplerConfig { rng_seed: prompt_seed(sampler.rng_seed, &task.id), ..sampler.clone() };
            let samples = generate_prepared(&prepared, &task.prompt, &cfg)?;
            Ok(samples.iter().filter(|s| s[task.prompt.len()..] == task.target[..]).count())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    pub k: usize,
    pub before: f64,
    pub after: f64,
}

/// Mean pass@k over tasks for every `k ≤ n`.
pub fn mean_pass_at_k(correct: &[usize], n: usize, k: usize) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::Input("no tasks".into()));
    }
    let s: f64 = correct.iter().map(|&c| pass_at_k(n, c, k)).sum::<Result<f64>>()?;
    Ok(s / correct.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub before: OutcomeCounts,
    pub after: OutcomeCounts,
    pub pct_change_bugs: Option<f64>,
    pub pct_change_fixes: Option<f64>,
    pub ppl_before: f64,
    pub ppl_after: f64,
    pub pass_at_k: Vec<PassAtK>,
    /// Between per-task pass@n vectors of the base and adapted model.
    pub wilcoxon: Option<Wilcoxon>,
    /// Why the test was not computed, when it was not.
    pub wilcoxon_note: Option<String>,
}

/// Inputs shared by every evaluation of one base model.
pub struct EvalSuite<'a> {
    pub tok: &'a Tokenizer,
    pub test_pairs: &'a [CodePair],
    pub heldout: &'a [Vec<usize>],
    pub tasks: &'a [CompletionTask],
    pub sampler: SamplerConfig,
    pub ks: Vec<usize>,
}

/// Base-model measurements, computed once and reused across adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub counts: OutcomeCounts,
    pub ppl: f64,
    pub task_correct: Vec<usize>,
}

impl EvalSuite<'_> {
    pub fn measure(&self, model: &TransformerLM, adapter: Option<&AdapterState>) -> Result<Baseline> {
        Ok(Baseline {
            counts: count_outcomes(model, adapter, self.tok, self.test_pairs, &self.sampler)?,
            ppl: perplexity(model, adapter, self.heldout)?,
            task_correct: task_correct_counts(model, adapter, self.tasks, &self.sampler)?,
        })
    }

    pub fn report(&self, label: &str, before: &Baseline, after: &Baseline) -> Result<EvalReport> {
        let n = self.sampler.num_samples;
        let mut pass = Vec::new();
        if !self.tasks.is_empty() {
            for &k in self.ks.iter().filter(|&&k| k >= 1 && k <= n) {
                pass.push(PassAtK {
                    k,
                    before: mean_pass_at_k(&before.task_correct, n, k)?,
                    after: mean_pass_at_k(&after.task_correct, n, k)?,
                });
            }
        }
        let vec = |c: &[usize]| -> Result<Vec<f64>> { c.iter().map(|&c| pass_at_k(n, c, n)).collect() };
        let (wilcoxon, wilcoxon_note) =
            match wilcoxon_signed_rank(&vec(&before.task_correct)?, &vec(&after.task_correct)?) {
                Ok(w) => (Some(w), None),
                Err(e @ Error::InsufficientData(_)) => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            };
        Ok(EvalReport {
            label: label.to_string(),
            before: before.counts,
            after: after.counts,
            pct_change_bugs: percent_change(before.counts.n_buggy, after.counts.n_buggy).ok(),
            pct_change_fixes: percent_change(before.counts.n_fixed, after.counts.n_fixed).ok(),
            ppl_before: before.ppl,
            ppl_after: after.ppl,
            pass_at_k: pass,
            wilcoxon,
            wilcoxon_note,
        })
    }
}

fn change_cell(count: usize, pct: Option<f64>) -> String {
    match pct {
        Some(p) => format!("{count} ({})", format_change(p)),
        None => format!("{count} (n/a)"),
    }
}

impl EvalReport {
    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| {} | Original | Hotfixed |", self.label);
        let _ = writeln!(s, "|---|---|---|");
        let _ = writeln!(s, "| # Bugs | {} | {} |", self.before.n_buggy, change_cell(self.after.n_buggy, self.pct_change_bugs));
        let _ = writeln!(s, "| # Fixes | {} | {} |", self.before.n_fixed, change_cell(self.after.n_fixed, self.pct_change_fixes));
        let _ = writeln!(s, "| # Neither | {} | {} |", self.before.n_neither, self.after.n_neither);
        let _ = writeln!(s, "| Perplexity | {:.2} | {:.2} |", self.ppl_before, self.ppl_after);
        for p in &self.pass_at_k {
            let _ = writeln!(s, "| pass@{} | {:.3} | {:.3} |", p.k, p.before, p.after);
        }
        match (&self.wilcoxon, &self.wilcoxon_note) {
            (Some(w), _) => {
                let _ = writeln!(s, "\nWilcoxon signed-rank: W = {}, p = {:.4}, n = {}", w.statistic, w.p_value, w.n_effective);
            }
            (None, Some(note)) => {
                let _ = writeln!(s, "\nWilcoxon signed-rank: not computed ({note})");
            }
            (None, None) => {}
        }
        s
    }
}
