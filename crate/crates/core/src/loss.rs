//! Hotfix objectives over a [`HotfixExample`]: Vanilla, Guided, Dual and
//! their KL-retention variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::HotfixExample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ModelVars, TransformerLM};
use crate::peft::AdapterVars;

/// Added to the denominator of the Dual ratio term.
pub const RATIO_GUARD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Objective {
    Vanilla,
    Guided,
    Dual,
    VanillaKl,
    GuidedKl,
    DualKl,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Vanilla,
        Objective::Guided,
        Objective::Dual,
        Objective::VanillaKl,
        Objective::GuidedKl,
        Objective::DualKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Vanilla => "Vanilla",
            Objective::Guided => "Guided",
            Objective::Dual => "Dual",
            Objective::VanillaKl => "Vanilla+KL",
            Objective::GuidedKl => "Guided+KL",
            Objective::DualKl => "Dual+KL",
        }
    }

    pub fn uses_kl(self) -> bool {
        matches!(self, Objective::VanillaKl | Objective::GuidedKl | Objective::DualKl)
    }

    /// The objective without its KL term.
    pub fn without_kl(self) -> Objective {
        match self {
            Objective::VanillaKl => Objective::Vanilla,
            Objective::GuidedKl => Objective::Guided,
            Objective::DualKl => Objective::Dual,
            o => o,
        }
    }

    pub fn with_kl(self) -> Objective {
        match self {
            Objective::Vanilla => Objective::VanillaKl,
            Objective::Guided => Objective::GuidedKl,
            Objective::Dual => Objective::DualKl,
            o => o,
        }
    }

    fn needs(self) -> Needs {
        let base = self.without_kl();
        Needs {
            vanilla: base == Objective::Vanilla,
            guided: base != Objective::Vanilla,
            unlearn: base == Objective::Dual,
            kl: self.uses_kl(),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    /// Case-insensitive; "Penalize" is accepted as another name for Dual.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(' ', "");
        let (head, kl) = match key.strip_suffix("+kl") {
            Some(h) => (h, true),
            None => (key.as_str(), false),
        };
        let base = match head {
            "vanilla" => Objective::Vanilla,
            "guided" => Objective::Guided,
            "dual" | "penalize" => Objective::Dual,
            _ => {
                return Err(Error::Config(format!(
                    "objective must be one of Vanilla, Guided, Dual, Vanilla+KL, Guided+KL, Dual+KL; got {s:?}"
                )))
            }
        };
        Ok(if kl { base.with_kl() } else { base })
    }
}

impl From<Objective> for String {
    fn from(o: Objective) -> String {
        o.name().to_string()
    }
}

impl TryFrom<String> for Objective {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug)]
struct Needs {
    vanilla: bool,
    guided: bool,
    unlearn: bool,
    kl: bool,
}

/// Graph handles of the loss components of one example.
#[derive(Clone, Copy, Debug, Default)]
pub struct Components {
    pub vanilla: Option<Var>,
    pub guided: Option<Var>,
    pub unlearn: Option<Var>,
    pub kl: Option<Var>,
}

/// Scalar values of one loss evaluation, as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub objective: Objective,
    pub l_vanilla: Option<f64>,
    pub l_guided: Option<f64>,
    pub l_unlearn: Option<f64>,
    pub l_ratio: Option<f64>,
    pub l_kl: Option<f64>,
    pub l_total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "objective,l_vanilla,l_guided,l_unlearn,l_ratio,l_kl,l_total";

    pub fn read(g: &Graph<'_>, objective: Objective, c: &Components, ratio: Option<Var>, total: Var) -> Self {
        let v = |x: Option<Var>| x.map(|x| g.scalar(x));
        LossBreakdown {
            objective,
            l_vanilla: v(c.vanilla),
            l_guided: v(c.guided),
            l_unlearn: v(c.unlearn),
            l_ratio: v(ratio),
            l_kl: v(c.kl),
            l_total: g.scalar(total),
        }
    }

    /// Element-wise mean of breakdowns of the same objective.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            items.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
        };
        Some(LossBreakdown {
            objective: first.objective,
            l_vanilla: avg(|b| b.l_vanilla),
            l_guided: avg(|b| b.l_guided),
            l_unlearn: avg(|b| b.l_unlearn),
            l_ratio: avg(|b| b.l_ratio),
            l_kl: avg(|b| b.l_kl),
            l_total: items.iter().map(|b| b.l_total).sum::<f64>() / n,
        })
    }

    pub fn csv_fields(&self) -> String {
        let f = |x: Option<f64>| x.map(|x| format!("{x:.10}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.10}",
            self.objective,
            f(self.l_vanilla),
            f(self.l_guided),
            f(self.l_unlearn),
            f(self.l_ratio),
            f(self.l_kl),
            self.l_total
        )
    }
}

/// Log-probabilities `[n−1 × V]` of the next-token predictions of `seq`.
pub fn next_token_log_probs(
    g: &mut Graph<'_>,
    model: &TransformerLM,
    vars: &ModelVars,
    adapter: Option<&AdapterVars>,
    seq: &[usize],
) -> Result<Var> {
    if seq.len() < 2 {
        return Err(Error::Input("sequence needs at least 2 tokens".into()));
    }
    let logits = model.forward(g, vars, adapter, &seq[..seq.len() - 1])?;
    g.log_softmax(logits)
}

/// Prediction weights: the weight of predicting token `t` is `mask[t]`.
fn shifted(mask: &[f64]) -> &[f64] {
    &mask[1..]
}

fn zero_mass(what: &str, pair: &str) -> Error {
    Error::DegeneratePair(format!("pair {pair}: {what} mask has no mass"))
}

/// Mean NLL over every next-token prediction of the fixed sequence.
pub fn vanilla_from(g: &mut Graph<'_>, fixed_logp: Var, ex: &HotfixExample) -> Result<Var> {
    g.weighted_nll(fixed_logp, &ex.fixed_tokens[1..], &vec![1.0; ex.fixed_tokens.len() - 1])
}

/// NLL over the fixed sequence weighted by `w_plus`.
pub fn guided_from(g: &mut Graph<'_>, fixed_logp: Var, ex: &HotfixExample) -> Result<Var> {
    g.weighted_nll(fixed_logp, &ex.fixed_tokens[1..], shifted(&ex.w_plus)).map_err(|e| match e {
        Error::ZeroMass => zero_mass("w_plus", &ex.pair_id),
        e => e,
    })
}

/// NLL over the buggy sequence weighted by `w_minus`.
pub fn unlearn_from(g: &mut Graph<'_>, buggy_logp: Var, ex: &HotfixExample) -> Result<Var> {
    g.weighted_nll(buggy_logp, &ex.buggy_tokens[1..], shifted(&ex.w_minus)).map_err(|e| match e {
        Error::ZeroMass => zero_mass("w_minus", &ex.pair_id),
        e => e,
    })
}

pub fn vanilla_loss(
    g: &mut Graph<'_>,
    model: &TransformerLM,
    vars: &ModelVars,
    adapter: Option<&AdapterVars>,
    ex: &HotfixExample,
) -> Result<Var> {
    let lp = next_token_log_probs(g, model, vars, adapter, &ex.fixed_tokens)?;
    vanilla_from(g, lp, ex)
}

pub fn guided_loss(
    g: &mut Graph<'_>,
    model: &TransformerLM,
    vars: &ModelVars,
    adapter: Option<&AdapterVars>,
    ex: &HotfixExample,
) -> Result<Var> {
    let lp = next_token_log_probs(g, model, vars, adapter, &ex.fixed_tokens)?;
    guided_from(g, lp, ex)
}

/// The value of the undesired-code loss. It is only ever used inside the
/// Dual ratio; see [`unlearn_ascent_loss`] for direct maximization.
pub fn unlearn_loss(
    g: &mut Graph<'_>,
    model: &TransformerLM,
    vars: &ModelVars,
    adapter: Option<&AdapterVars>,
    ex: &HotfixExample,
) -> Result<Var> {
    let lp = next_token_log_probs(g, model, vars, adapter, &ex.buggy_tokens)?;
    unlearn_from(g, lp, ex)
}

/// `−L_unlearn`: gradient ascent on the buggy tokens. Kept out of the
/// supported objectives; it only exists to show that it degrades the model.
#[cfg(any(test, feature = "unlearn-ascent"))]
pub fn unlearn_ascent_loss(
    g: &mut Graph<'_>,
    model: &TransformerLM,
    vars: &ModelVars,
    adapter: Option<&AdapterVars>,
    ex: &HotfixExample,
) -> Result<Var> {
    let l = unlearn_loss(g, model, vars, adapter, ex)?;
    Ok(g.scale(l, -1.0))
}

/// `L_guided / (L_guided + L_unlearn + guard)`.
pub fn ratio_term(g: &mut Graph<'_>, guided: Var, unlearn: Var) -> Result<Var> {
    let den = g.add(guided, unlearn)?;
    let den = g.add_const(den, RATIO_GUARD);
    g.div(guided, den)
}

/// `(L_guided + ratio) / 2`, with the ratio handle.
pub fn dual_from(g: &mut Graph<'_>, guided: Var, unlearn: Var) -> Result<(Var, Var)> {
    let ratio = ratio_term(g, guided, unlearn)?;
    let s = g.add(guided, ratio)?;
    Ok((g.scale(s, 0.5), ratio))
}

pub fn dual_loss(
    g: &mut Graph<'_>,
    model: &TransformerLM,
    vars: &ModelVars,
    adapter: Option<&AdapterVars>,
    ex: &HotfixExample,
) -> Result<(Var, LossBreakdown)> {
    let guided = guided_loss(g, model, vars, adapter, ex)?;
    let unlearn = unlearn_loss(g, model, vars, adapter, ex)?;
    let (total, ratio) = dual_from(g, guided, unlearn)?;
    let c = Components { guided: Some(guided), unlearn: Some(unlearn), ..Components::default() };
    Ok((total, LossBreakdown::read(g, Objective::Dual, &c, Some(ratio), total)))
}

/// Combines components per the objective. Returns `(total, ratio)`; the
/// ratio handle is present for Dual objectives.
pub fn combine(g: &mut Graph<'_>, objective: Objective, c: &Components) -> Result<(Var, Option<Var>)> {
    let need = |x: Option<Var>, what: &str| {
        x.ok_or_else(|| Error::Config(format!("objective {objective} needs the {what} loss")))
    };
    let kl = if objective.uses_kl() { Some(need(c.kl, "KL")?) } else { None };
    let (parts, ratio) = match objective.without_kl() {
        Objective::Vanilla => (vec![need(c.vanilla, "vanilla")?], None),
        Objective::Guided => (vec![need(c.guided, "guided")?], None),
        _ => {
            let guided = need(c.guided, "guided")?;
            let ratio = ratio_term(g, guided, need(c.unlearn, "unlearn")?)?;
            (vec![guided, ratio], Some(ratio))
        }
    };
    let mut terms = parts;
    terms.extend(kl);
    // Plain Vanilla and Guided pass through; the rest average their terms.
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    if terms.len() > 1 {
        total = g.scale(total, 1.0 / terms.len() as f64);
    }
    Ok((total, ratio))
}

/// Reference-model distributions for the KL term, row-major `[rows × V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetainRows<'a> {
    /// Base-model distributions of the first `context_len − 1` predictions
    /// of the example (those whose targets are context tokens).
    pub context_ref: &'a [f64],
    /// A neutral sequence and the base-model distributions of all of its
    /// `len − 1` next-token predictions.
    pub neutral: Option<(&'a [usize], &'a [f64])>,
}

/// Base-model next-token distributions over `seq`'s first `rows` predictions.
pub fn reference_probs(model: &TransformerLM, seq: &[usize], rows: usize) -> Result<Vec<f64>> {
    if rows == 0 {
        return Ok(Vec::new());
    }
    let lp = model.log_probs(&seq[..rows], None)?;
    Ok(lp.into_iter().map(f64::exp).collect())
}

/// Reference rows for the context predictions of `ex`.
pub fn context_reference(model: &TransformerLM, ex: &HotfixExample) -> Result<Vec<f64>> {
    reference_probs(model, &ex.fixed_tokens, ex.context_len.saturating_sub(1))
}

/// Mean `KL(P₀ ‖ P)` over the example's context predictions (taken from
/// `fixed_logp`) and the neutral sequence's predictions.
pub fn kl_retain_loss(
    g: &mut Graph<'_>,
    model: &TransformerLM,
    vars: &ModelVars,
    adapter: Option<&AdapterVars>,
    fixed_logp: Var,
    rows: &RetainRows<'_>,
) -> Result<Var> {
    let (t, v) = g.dims(fixed_logp);
    let n_ctx = rows.context_ref.len() / v;
    if rows.context_ref.len() != n_ctx * v || n_ctx > t {
        return Err(Error::Shape(format!("context reference of {} values for [{t}, {v}]", rows.context_ref.len())));
    }
    let uniform = 1.0 / v as f64;
    let mut p_ref = rows.context_ref.to_vec();
    p_ref.resize(t * v, uniform);
    let mut mask = vec![0.0; t];
    mask[..n_ctx].iter_mut().for_each(|m| *m = 1.0);
    let mut logp = fixed_logp;
    if let Some((seq, neutral_ref)) = rows.neutral {
        let nlp = next_token_log_probs(g, model, vars, adapter, seq)?;
        if neutral_ref.len() != g.dims(nlp).0 * v {
            return Err(Error::Shape(format!("neutral reference of {} values for {} rows", neutral_ref.len(), seq.len() - 1)));
        }
        logp = g.concat_rows(&[fixed_logp, nlp])?;
        p_ref.extend_from_slice(neutral_ref);
        mask.resize(mask.len() + seq.len() - 1, 1.0);
    }
    g.kl_rowwise_log(&p_ref, logp, &mask)
}

/// Records every component the objective needs and the combined loss.
pub fn objective_loss(
    g: &mut Graph<'_>,
    model: &TransformerLM,
    vars: &ModelVars,
    adapter: Option<&AdapterVars>,
    objective: Objective,
    ex: &HotfixExample,
    retain: Option<&RetainRows<'_>>,
) -> Result<(Var, LossBreakdown)> {
    let needs = objective.needs();
    let mut c = Components::default();
    let fixed_lp = next_token_log_probs(g, model, vars, adapter, &ex.fixed_tokens)?;
    if needs.vanilla {
        c.vanilla = Some(vanilla_from(g, fixed_lp, ex)?);
    }
    if needs.guided {
        c.guided = Some(guided_from(g, fixed_lp, ex)?);
    }
    if needs.unlearn {
        let buggy_lp = next_token_log_probs(g, model, vars, adapter, &ex.buggy_tokens)?;
        c.unlearn = Some(unlearn_from(g, buggy_lp, ex)?);
    }
    if needs.kl {
        let rows = retain.ok_or_else(|| Error::Config(format!("objective {objective} needs KL reference rows")))?;
        c.kl = Some(kl_retain_loss(g, model, vars, adapter, fixed_lp, rows)?);
    }
    let (total, ratio) = combine(g, objective, &c)?;
    if !g.scalar(total).is_finite() {
        return Err(Error::Numeric(format!("pair {}: {objective} loss is not finite", ex.pair_id)));
    }
    Ok((total, LossBreakdown::read(g, objective, &c, ratio, total)))
}
