//! End-to-end run on a small synthetic corpus: pretrain a tiny base, hotfix
//! it with every adapter kind, and evaluate.

use hotfix_core::data::diff::diff_masks;
use hotfix_core::data::synth::synth_corpus;
use hotfix_core::data::{build_example, HotfixExample, Tokenizer};
use hotfix_core::eval::{count_outcomes, perplexity};
use hotfix_core::hotfix::{mean_dual_loss, train_adapter, HotfixConfig};
use hotfix_core::infer::SamplerConfig;
use hotfix_core::loss::Objective;
use hotfix_core::model::{train_base, ModelConfig, TrainBaseConfig, TransformerLM};
use hotfix_core::optim::{Adam, AdamConfig};
use hotfix_core::peft::{init_adapter, quantize_base, AdapterKind, AdapterSpec};

struct Setup {
    tok: Tokenizer,
    base: TransformerLM,
    pairs: Vec<hotfix_core::data::CodePair>,
    examples: Vec<HotfixExample>,
    neutral: Vec<Vec<usize>>,
}

fn setup() -> Setup {
    let (pairs, neutral_text) = synth_corpus(3, 24, 24);
    let texts: Vec<String> = pairs
        .iter()
        .flat_map(|p| [p.full_text(&p.buggy_stmt), p.full_text(&p.fixed_stmt)])
        .chain(neutral_text.iter().cloned())
        .collect();
    let tok = Tokenizer::fit(texts.iter().map(String::as_str), 512).unwrap();
    let cfg = ModelConfig { vocab_size: tok.len(), embed_dim: 16, n_layers: 1, n_heads: 2, context_len: 64, seed: 4 };
    let mut base = TransformerLM::new(cfg).unwrap();
    let neutral: Vec<Vec<usize>> = neutral_text.iter().map(|t| tok.encode(t)).collect();
    let mut corpus = neutral.clone();
    corpus.extend(pairs.iter().map(|p| tok.encode(&p.full_text(&p.buggy_stmt))));
    let mut opt = Adam::new(AdamConfig::with_lr(1e-2)).unwrap();
    let losses = train_base(&mut base, &corpus, &TrainBaseConfig { epochs: 3, batch_size: 4, seed: 0 }, &mut opt, |_, _| {}).unwrap();
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    base.set_trainable(false);
    let examples = pairs.iter().map(|p| build_example(p, &tok).unwrap()).collect();
    Setup { tok, base, pairs, examples, neutral }
}

#[test]
fn synthetic_pairs_have_small_planted_edits() {
    let (pairs, _) = synth_corpus(9, 40, 0);
    for p in &pairs {
        let (wm, wp) = diff_masks(
            &p.buggy_stmt.split(' ').collect::<Vec<_>>(),
            &p.fixed_stmt.split(' ').collect::<Vec<_>>(),
        )
        .unwrap();
        let edits = wm.iter().sum::<f64>().max(wp.iter().sum::<f64>());
        assert!((1.0..=2.0).contains(&edits), "{p:?}");
    }
}

#[test]
fn every_adapter_kind_lowers_the_dual_loss_without_touching_the_base() {
    let s = setup();
    let snapshot = s.base.clone();
    let (train, validation) = s.examples.split_at(20);
    for kind in [AdapterKind::Lora, AdapterKind::Ia3, AdapterKind::Prefix, AdapterKind::Qlora] {
        let model = if kind == AdapterKind::Qlora { quantize_base(&s.base, 8).unwrap() } else { s.base.clone() };
        let mut adapter = init_adapter(&AdapterSpec::new(kind), &model.config, 0).unwrap();
        let before = mean_dual_loss(&model, Some(&adapter), train).unwrap();
        let cfg = HotfixConfig {
            objective: Objective::DualKl,
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-2,
            seed: 0,
            patience: None,
        };
        let mut steps = 0;
        let outcome = train_adapter(&model, &mut adapter, train, validation, &s.neutral, &cfg, |_| steps += 1, |_| {}).unwrap();
        assert_eq!(outcome.epochs.len(), 3);
        assert_eq!(steps, 15);
        let after = mean_dual_loss(&model, Some(&adapter), train).unwrap();
        assert!(after < before, "{}: {before} -> {after}", kind.name());
        assert_eq!(s.base, snapshot);
    }
}

#[test]
fn evaluation_counts_are_conserved_and_reproducible() {
    let s = setup();
    let sampler = SamplerConfig { num_samples: 3, max_new_tokens: 8, stop_token: s.tok.id(";"), ..Default::default() };
    let a = count_outcomes(&s.base, None, &s.tok, &s.pairs[..6], &sampler).unwrap();
    let b = count_outcomes(&s.base, None, &s.tok, &s.pairs[..6], &sampler).unwrap();
    assert_eq!(a, b);
    assert!(a.is_conserved());
    assert_eq!(a.n_prompts, 6);
    let ppl = perplexity(&s.base, None, &s.neutral).unwrap();
    assert!(ppl > 1.0 && ppl < s.tok.len() as f64, "{ppl}");
}
