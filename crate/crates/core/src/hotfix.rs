//! Adapter training against a frozen base model.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::HotfixExample;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{context_reference, dual_from, guided_from, next_token_log_probs, objective_loss, reference_probs};
use crate::loss::{unlearn_from, LossBreakdown, Objective, RetainRows};
use crate::model::TransformerLM;
use crate::optim::{Adam, AdamConfig};
use crate::peft::AdapterState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotfixConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop after this many epochs without a lower validation Dual loss.
    /// `None` trains for all epochs.
    pub patience: Option<usize>,
}

impl Default for HotfixConfig {
    fn default() -> Self {
        HotfixConfig {
            objective: Objective::DualKl,
            epochs: 20,
            batch_size: 8,
            learning_rate: 3e-4,
            seed: 0,
            patience: Some(3),
        }
    }
}

impl HotfixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("training.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("training.patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Batch-mean losses of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossBreakdown,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,objective,l_vanilla,l_guided,l_unlearn,l_ratio,l_kl,l_total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.step, self.epoch, self.losses.csv_fields())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation_dual: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HotfixOutcome {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose adapter was kept (lowest validation Dual loss).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Mean Dual loss of `adapter` over `examples`.
pub fn mean_dual_loss(model: &TransformerLM, adapter: Option<&AdapterState>, examples: &[HotfixExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to score".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let av = adapter.map(|a| a.bind(&mut g));
        let flp = next_token_log_probs(&mut g, model, &vars, av.as_ref(), &ex.fixed_tokens)?;
        let blp = next_token_log_probs(&mut g, model, &vars, av.as_ref(), &ex.buggy_tokens)?;
        let guided = guided_from(&mut g, flp, ex)?;
        let unlearn = unlearn_from(&mut g, blp, ex)?;
        let (d, _) = dual_from(&mut g, guided, unlearn)?;
        total += g.scalar(d);
    }
    Ok(total / examples.len() as f64)
}

/// Trains `adapter` on `train` under `cfg.objective`, leaving `model`
/// untouched. KL objectives draw one sequence from `neutral` per example
/// per step. On return the adapter holds the epoch with the lowest
/// validation Dual loss (or the last epoch without validation data).
pub fn train_adapter(
    model: &TransformerLM,
    adapter: &mut AdapterState,
    train: &[HotfixExample],
    validation: &[HotfixExample],
    neutral: &[Vec<usize>],
    cfg: &HotfixConfig,
    mut on_step: impl FnMut(&StepRecord),
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<HotfixOutcome> {
    cfg.validate()?;
    adapter.check_config(&model.config)?;
    if train.is_empty() {
        return Err(Error::Input("no hotfix training examples".into()));
    }
    let kl = cfg.objective.uses_kl();
    let neutral: Vec<&[usize]> = neutral
        .iter()
        .map(|s| &s[..s.len().min(model.config.context_len)])
        .filter(|s| s.len() >= 2)
        .collect();
    if kl && neutral.is_empty() {
        return Err(Error::Input(format!("objective {} needs neutral sequences", cfg.objective)));
    }
    let context_refs: Vec<Vec<f64>> = if kl {
        train.iter().map(|ex| context_reference(model, ex)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut neutral_refs: Vec<Option<Vec<f64>>> = vec![None; neutral.len()];

    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, AdapterState)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = Vec::new();
            let mut batch_losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let picked = if kl {
                    let j = rng.random_range(0..neutral.len());
                    if neutral_refs[j].is_none() {
                        neutral_refs[j] = Some(reference_probs(model, neutral[j], neutral[j].len() - 1)?);
                    }
                    Some(j)
                } else {
                    None
                };
                let rows = picked.map(|j| RetainRows {
                    context_ref: &context_refs[i],
                    neutral: Some((neutral[j], neutral_refs[j].as_deref().unwrap())),
                });
                let (losses, grads) = {
                    let mut g = Graph::new();
                    let vars = model.bind(&mut g);
                    let av = adapter.bind(&mut g);
                    let (total, losses) =
                        objective_loss(&mut g, model, &vars, Some(&av), cfg.objective, &train[i], rows.as_ref())?;
                    let grads = g.backward(total)?;
                    let per: Vec<Vec<f64>> = av
                        .vars()
                        .iter()
                        .zip(adapter.named_tensors())
                        .map(|(&v, (_, t))| grads.get(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
                        .collect();
                    (losses, per)
                };
                if acc.is_empty() {
                    acc = grads;
                } else {
                    for (a, gr) in acc.iter_mut().zip(&grads) {
                        a.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
                batch_losses.push(losses);
            }
            let inv = 1.0 / batch.len() as f64;
            let mut params = adapter.named_tensors_mut();
            for ((_, t), a) in params.iter_mut().zip(&acc) {
                t.zero_grad();
                let scaled: Vec<f64> = a.iter().map(|x| x * inv).collect();
                t.accumulate_grad(&scaled)?;
            }
            opt.step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)))?;
            step += 1;
            on_step(&StepRecord { step, epoch, losses: LossBreakdown::mean(&batch_losses).unwrap() });
            epoch_losses.extend(batch_losses);
        }
        let validation_dual =
            if validation.is_empty() { None } else { Some(mean_dual_loss(model, Some(adapter), validation)?) };
        let record = EpochRecord {
            epoch,
            train: LossBreakdown::mean(&epoch_losses).unwrap(),
            validation_dual,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);
        if let Some(v) = validation_dual {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, adapter.clone()));
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience.is_some_and(|p| stale >= p) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, state)) => {
            *adapter = state;
            Some(e)
        }
        None => records.last().map(|r| r.epoch),
    };
    for (_, t) in adapter.named_tensors_mut() {
        t.zero_grad();
    }
    Ok(HotfixOutcome { epochs: records, best_epoch, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::diff::diff_masks;
    use crate::model::ModelConfig;
    use crate::peft::{init_adapter, AdapterKind, AdapterSpec};

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 12, embed_dim: 16, n_layers: 2, n_heads: 2, context_len: 16, seed: 3 }
    }

    fn examples() -> Vec<HotfixExample> {
        (0..4)
            .map(|k| {
                let buggy = vec![1, 2 + k, 3, 4, 5, 6];
                let fixed = vec![1, 2 + k, 3, 9, 5, 6];
                let (w_minus, w_plus) = diff_masks(&buggy, &fixed).unwrap();
                HotfixExample {
                    pair_id: format!("e{k}"),
                    fixed_tokens: fixed,
                    buggy_tokens: buggy,
                    w_plus,
                    w_minus,
                    context_len: 3,
                }
            })
            .collect()
    }

    /// A random model whose head is large enough for an adapter to move the
    /// output distribution far.
    fn model() -> TransformerLM {
        let mut m = TransformerLM::new(tiny()).unwrap();
        for (n, t) in m.named_tensors_mut() {
            if n == "head" {
                t.data_mut().iter_mut().for_each(|x| *x *= 25.0);
            }
        }
        m
    }

    fn run(kind: AdapterKind, objective: Objective, epochs: usize) -> (TransformerLM, AdapterState, HotfixOutcome, Vec<StepRecord>) {
        let model = model();
        let mut adapter = init_adapter(&AdapterSpec::new(kind), &model.config, 1).unwrap();
        let neutral = vec![vec![1, 7, 8, 2, 3], vec![4, 4, 5, 10]];
        let cfg = HotfixConfig { objective, epochs, batch_size: 2, learning_rate: 1e-2, seed: 5, patience: None };
        let ex = examples();
        let mut steps = Vec::new();
        let out = train_adapter(&model, &mut adapter, &ex, &ex[..1], &neutral, &cfg, |s| steps.push(s.clone()), |_| {})
            .unwrap();
        (model, adapter, out, steps)
    }

    #[test]
    fn base_weights_are_untouched() {
        let fresh = model();
        for kind in [AdapterKind::Lora, AdapterKind::Ia3, AdapterKind::Prefix] {
            let (model, _, _, _) = run(kind, Objective::DualKl, 2);
            for ((n, a), (_, b)) in model.named_tensors().iter().zip(fresh.named_tensors()) {
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{n}");
            }
        }
    }

    #[test]
    fn dual_training_moves_probability_to_the_fix() {
        let before = mean_dual_loss(&model(), None, &examples()).unwrap();
        let (model, adapter, out, steps) = run(AdapterKind::Lora, Objective::Dual, 30);
        let after = mean_dual_loss(&model, Some(&adapter), &examples()).unwrap();
        assert!(after < before * 0.5, "{before} -> {after}");
        assert_eq!(steps.len(), 30 * 2);
        assert_eq!(out.epochs.len(), 30);
        assert!(steps.iter().all(|s| s.losses.l_unlearn.is_some() && s.losses.l_kl.is_none()));
    }

    #[test]
    fn log_columns_follow_the_objective() {
        for o in Objective::ALL {
            let (_, _, _, steps) = run(AdapterKind::Lora, o, 1);
            let l = &steps[0].losses;
            assert_eq!(l.objective, o);
            assert_eq!(l.l_kl.is_some(), o.uses_kl());
            assert_eq!(l.l_vanilla.is_some(), o.without_kl() == Objective::Vanilla);
            assert_eq!(l.l_ratio.is_some(), o.without_kl() == Objective::Dual);
            assert_eq!(steps[0].csv_row().split(',').count(), StepRecord::CSV_HEADER.split(',').count());
        }
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let (_, a, _, s) = run(AdapterKind::Lora, Objective::GuidedKl, 2);
        let (_, b, _, t) = run(AdapterKind::Lora, Objective::GuidedKl, 2);
        assert_eq!(a, b);
        assert_eq!(s, t);
    }

    #[test]
    fn early_stop_keeps_the_best_epoch() {
        let model = TransformerLM::new(tiny()).unwrap();
        let mut adapter = init_adapter(&AdapterSpec::new(AdapterKind::Lora), &model.config, 1).unwrap();
        let ex = examples();
        // A huge learning rate makes validation loss bounce around.
        let cfg = HotfixConfig { objective: Objective::Vanilla, epochs: 30, batch_size: 4, learning_rate: 0.5, seed: 1, patience: Some(2) };
        let out = train_adapter(&model, &mut adapter, &ex, &ex[2..], &[], &cfg, |_| {}, |_| {}).unwrap();
        let best = out.best_epoch.unwrap();
        let min = out.epochs.iter().map(|e| e.validation_dual.unwrap()).fold(f64::INFINITY, f64::min);
        assert_eq!(out.epochs[best].validation_dual.unwrap(), min);
        let kept = mean_dual_loss(&model, Some(&adapter), &ex[2..]).unwrap();
        assert_eq!(kept, min);
        if out.stopped_early {
            assert_eq!(out.epochs.len(), best + 3);
        }
    }

    #[test]
    fn kl_objective_without_neutral_text_is_rejected() {
        let model = TransformerLM::new(tiny()).unwrap();
        let mut adapter = init_adapter(&AdapterSpec::new(AdapterKind::Lora), &model.config, 1).unwrap();
        let cfg = HotfixConfig::default();
        let err = train_adapter(&model, &mut adapter, &examples(), &[], &[], &cfg, |_| {}, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let bad = HotfixConfig { learning_rate: 0.0, ..cfg };
        assert!(matches!(train_adapter(&model, &mut adapter, &examples(), &[], &[], &bad, |_| {}, |_| {}), Err(Error::Config(_))));
    }
}
