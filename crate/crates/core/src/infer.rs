//! Incremental decoding with a key/value cache, and sampling.
//!
//! [`Prepared`] resolves a model plus optional adapter into plain weight
//! slices (dequantizing once); a [`Session`] holds the per-layer key/value
//! rows seen so far and can be cloned to branch several samples off one
//! prompt.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Linear, TransformerLM};
use crate::peft::{AdapterParams, AdapterState, Target};
use crate::tensor::vec_mat;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
    pub num_samples: usize,
    pub stop_token: Option<usize>,
    pub rng_seed: u64,
    /// Always pick the most likely token (the temperature → 0 limit).
    pub greedy: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 0.8,
            top_k: None,
            max_new_tokens: 16,
            num_samples: 10,
            stop_token: None,
            rng_seed: 0,
            greedy: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("sampler.temperature must be positive, got {}", self.temperature)));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("sampler.num_samples must be >= 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("sampler.max_new_tokens must be >= 1".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("sampler.top_k must be >= 1".into()));
        }
        Ok(())
    }
}

struct LoraView<'m> {
    target: Target,
    a: &'m [f64],
    b: &'m [f64],
}

struct LayerView<'m> {
    ln1: (&'m [f64], &'m [f64]),
    wq: Cow<'m, [f64]>,
    wk: Cow<'m, [f64]>,
    wv: Cow<'m, [f64]>,
    wo: Cow<'m, [f64]>,
    ln2: (&'m [f64], &'m [f64]),
    ff1: Cow<'m, [f64]>,
    ff2: Cow<'m, [f64]>,
    lora: Vec<LoraView<'m>>,
    ia3: Option<[&'m [f64]; 3]>,
    prefix: Option<(&'m [f64], &'m [f64])>,
}

/// Model and adapter weights resolved for fast single-token steps.
pub struct Prepared<'m> {
    model: &'m TransformerLM,
    layers: Vec<LayerView<'m>>,
    head: Cow<'m, [f64]>,
    lora_scale: f64,
    rank: usize,
    prefix_len: usize,
}

fn weights(lin: &Linear) -> Cow<'_, [f64]> {
    match lin {
        Linear::Dense(t) => Cow::Borrowed(t.data()),
        Linear::Quantized(q) => Cow::Owned(q.dequantize()),
    }
}

impl<'m> Prepared<'m> {
    pub fn new(model: &'m TransformerLM, adapter: Option<&'m AdapterState>) -> Result<Self> {
        if let Some(a) = adapter {
            a.check_config(&model.config)?;
        }
        let mut layers: Vec<LayerView<'m>> = model
            .blocks
            .iter()
            .map(|b| LayerView {
                ln1: (b.ln1_gain.data(), b.ln1_bias.data()),
                wq: weights(&b.wq),
                wk: weights(&b.wk),
                wv: weights(&b.wv),
                wo: weights(&b.wo),
                ln2: (b.ln2_gain.data(), b.ln2_bias.data()),
                ff1: weights(&b.ff1),
                ff2: weights(&b.ff2),
                lora: Vec::new(),
                ia3: None,
                prefix: None,
            })
            .collect();
        let (mut lora_scale, mut rank, mut prefix_len) = (0.0, 0, 0);
        if let Some(a) = adapter {
            match &a.params {
                AdapterParams::Lora(ls) => {
                    lora_scale = a.spec.scale();
                    rank = a.spec.rank;
                    for (lv, pairs) in layers.iter_mut().zip(ls) {
                        lv.lora = pairs.iter().map(|p| LoraView { target: p.target, a: p.a.data(), b: p.b.data() }).collect();
                    }
                }
                AdapterParams::Ia3(ls) => {
                    for (lv, s) in layers.iter_mut().zip(ls) {
                        lv.ia3 = Some([s.key.data(), s.value.data(), s.ff.data()]);
                    }
                }
                AdapterParams::Prefix(ls) => {
                    prefix_len = a.spec.prefix_len;
                    for (lv, b) in layers.iter_mut().zip(ls) {
                        lv.prefix = Some((b.keys.data(), b.values.data()));
                    }
                }
            }
        }
        Ok(Prepared { model, layers, head: weights(&model.head), lora_scale, rank, prefix_len })
    }

    pub fn model(&self) -> &TransformerLM {
        self.model
    }

    /// Empty cache, seeded with prefix rows when a prefix adapter is attached.
    pub fn session(&self) -> Session {
        let layers = self
            .layers
            .iter()
            .map(|l| match l.prefix {
                Some((k, v)) => (k.to_vec(), v.to_vec()),
                None => (Vec::new(), Vec::new()),
            })
            .collect();
        Session { pos: 0, cache: layers }
    }

    fn project(&self, lv: &LayerView<'_>, target: Target, w: &[f64], x: &[f64], out_dim: usize) -> Vec<f64> {
        let mut y = vec![0.0; out_dim];
        vec_mat(x, w, out_dim, &mut y);
        if let Some(l) = lv.lora.iter().find(|l| l.target == target) {
            let mut xa = vec![0.0; self.rank];
            vec_mat(x, l.a, self.rank, &mut xa);
            let mut xab = vec![0.0; out_dim];
            vec_mat(&xa, l.b, out_dim, &mut xab);
            y.iter_mut().zip(&xab).for_each(|(o, v)| *o += v * self.lora_scale);
        }
        y
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&self, s: &mut Session, token: usize) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        if token >= cfg.vocab_size {
            return Err(Error::Input(format!("token id {token} out of range for vocabulary of {}", cfg.vocab_size)));
        }
        if s.pos >= cfg.context_len {
            return Err(Error::Length { len: s.pos + 1, max: cfg.context_len });
        }
        let (d, f, nh, dh) = (cfg.embed_dim, cfg.ff_dim(), cfg.n_heads, cfg.head_dim());
        let te = &self.model.tok_emb.data()[token * d..(token + 1) * d];
        let pe = &self.model.pos_emb.data()[s.pos * d..(s.pos + 1) * d];
        let mut x: Vec<f64> = te.iter().zip(pe).map(|(a, b)| a + b).collect();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for (lv, (kc, vc)) in self.layers.iter().zip(s.cache.iter_mut()) {
            let h = layer_norm(&x, lv.ln1.0, lv.ln1.1);
            let q = self.project(lv, Target::Query, &lv.wq, &h, d);
            let mut k = self.project(lv, Target::Key, &lv.wk, &h, d);
            let mut v = self.project(lv, Target::Value, &lv.wv, &h, d);
            if let Some([sk, sv, _]) = lv.ia3 {
                k.iter_mut().zip(sk).for_each(|(a, b)| *a *= b);
                v.iter_mut().zip(sv).for_each(|(a, b)| *a *= b);
            }
            kc.extend_from_slice(&k);
            vc.extend_from_slice(&v);
            let rows = kc.len() / d;
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; rows];
            for hd in 0..nh {
                let off = hd * dh;
                let qh = &q[off..off + dh];
                for (r, sc) in scores.iter_mut().enumerate() {
                    let kr = &kc[r * d + off..r * d + off + dh];
                    *sc = qh.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                scores.iter_mut().for_each(|sc| {
                    *sc = (*sc - max).exp();
                    total += *sc;
                });
                let out = &mut att[off..off + dh];
                for (r, sc) in scores.iter().enumerate() {
                    let w = sc / total;
                    let vr = &vc[r * d + off..r * d + off + dh];
                    out.iter_mut().zip(vr).for_each(|(o, val)| *o += w * val);
                }
            }
            let o = self.project(lv, Target::Output, &lv.wo, &att, d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = layer_norm(&x, lv.ln2.0, lv.ln2.1);
            let mut u = self.project(lv, Target::Ff1, &lv.ff1, &h, f);
            for val in u.iter_mut() {
                let z = *val;
                *val = 0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh());
            }
            if let Some([_, _, sf]) = lv.ia3 {
                u.iter_mut().zip(sf).for_each(|(a, b)| *a *= b);
            }
            let ffo = self.project(lv, Target::Ff2, &lv.ff2, &u, d);
            x.iter_mut().zip(&ffo).for_each(|(a, b)| *a += b);
        }
        s.pos += 1;
        let h = layer_norm(&x, self.model.lnf_gain.data(), self.model.lnf_bias.data());
        let mut logits = vec![0.0; cfg.vocab_size];
        vec_mat(&h, &self.head, cfg.vocab_size, &mut logits);
        Ok(logits)
    }

    /// Feeds a whole prompt, returning the logits after its last token.
    pub fn prefill(&self, s: &mut Session, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        let mut last = Vec::new();
        for &t in tokens {
            last = self.step(s, t)?;
        }
        Ok(last)
    }

    /// Number of prefix slots in every layer's cache.
    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }
}

/// Key/value cache for one decoding stream.
#[derive(Clone, Debug)]
pub struct Session {
    pos: usize,
    cache: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Session {
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, gi), bi)| (v - mean) * rs * gi + bi).collect()
}

/// Draws the next token from `logits` under `cfg`.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplerConfig, rng: &mut R) -> usize {
    if cfg.greedy || cfg.top_k == Some(1) {
        return argmax(logits);
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = cfg.top_k {
        // Stable sort keeps lower ids first among equal logits.
        idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        idx.truncate(k.min(logits.len()));
        idx.sort_unstable();
    }
    let max = idx.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = idx.iter().map(|&i| ((logits[i] - max) / cfg.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (j, w) in weights.iter().enumerate() {
        if u < *w {
            return idx[j];
        }
        u -= w;
    }
    // Rounding can leave a sliver of mass; fall back to the last candidate.
    *idx.last().unwrap()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Samples `cfg.num_samples` continuations of `prompt`. Each returned
/// sequence starts with the prompt and ends at the stop token (inclusive) or
/// after `max_new_tokens` new tokens.
pub fn generate(
    model: &TransformerLM,
    prompt: &[usize],
    cfg: &SamplerConfig,
    adapter: Option<&AdapterState>,
) -> Result<Vec<Vec<usize>>> {
    let prepared = Prepared::new(model, adapter)?;
    generate_prepared(&prepared, prompt, cfg)
}

pub fn generate_prepared(p: &Prepared<'_>, prompt: &[usize], cfg: &SamplerConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let max = p.model.config.context_len;
    if prompt.len() + cfg.max_new_tokens > max {
        return Err(Error::Length { len: prompt.len() + cfg.max_new_tokens, max });
    }
    let mut base = p.session();
    let first = p.prefill(&mut base, prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::with_capacity(cfg.num_samples);
    for _ in 0..cfg.num_samples {
        let mut s = base.clone();
        let mut logits = first.clone();
        let mut seq = prompt.to_vec();
        for n in 0..cfg.max_new_tokens {
            let tok = sample_token(&logits, cfg, &mut rng);
            seq.push(tok);
            if Some(tok) == cfg.stop_token || n + 1 == cfg.max_new_tokens {
                break;
            }
            logits = p.step(&mut s, tok)?;
        }
        out.push(seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::peft::{init_adapter, quantize_base, AdapterKind, AdapterSpec};
    use crate::tensor::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 11, embed_dim: 8, n_layers: 2, n_heads: 2, context_len: 16, seed: 7 }
    }

    fn perturbed(kind: AdapterKind, cfg: &ModelConfig) -> AdapterState {
        let mut spec = AdapterSpec::new(kind);
        spec.targets = Target::ALL.to_vec();
        let mut a = init_adapter(&spec, cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (_, t) in a.named_tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
        a
    }

    fn assert_matches_tape(model: &TransformerLM, adapter: Option<&AdapterState>) {
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let full = model.logits(&tokens, adapter).unwrap();
        let p = Prepared::new(model, adapter).unwrap();
        let mut s = p.session();
        for (i, &t) in tokens.iter().enumerate() {
            let row = p.step(&mut s, t).unwrap();
            for (a, b) in row.iter().zip(&full.data()[i * 11..(i + 1) * 11]) {
                assert!((a - b).abs() < 1e-9, "position {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn cached_decoding_matches_tape_forward() {
        let m = TransformerLM::new(tiny()).unwrap();
        assert_matches_tape(&m, None);
        for kind in [AdapterKind::Lora, AdapterKind::Ia3, AdapterKind::Prefix] {
            let a = perturbed(kind, &m.config);
            assert_matches_tape(&m, Some(&a));
        }
        let q = quantize_base(&m, 4).unwrap();
        let a = perturbed(AdapterKind::Qlora, &m.config);
        assert_matches_tape(&q, Some(&a));
    }

    #[test]
    fn greedy_follows_argmax_chain() {
        let mut m = TransformerLM::new(tiny()).unwrap();
        // Head that always prefers token 7 by a huge margin.
        let mut head = vec![0.0; 8 * 11];
        m.lnf_gain = Tensor::zeros(&[8]);
        m.lnf_bias = Tensor::filled(&[8], 1.0);
        for r in 0..8 {
            head[r * 11 + 7] = 100.0;
        }
        m.head = Linear::Dense(Tensor::new(&[8, 11], head).unwrap());
        let cfg = SamplerConfig { greedy: true, num_samples: 3, max_new_tokens: 4, ..Default::default() };
        let out = generate(&m, &[1, 2], &cfg, None).unwrap();
        assert_eq!(out, vec![vec![1, 2, 7, 7, 7, 7]; 3]);
    }

    #[test]
    fn sample_count_stop_and_determinism() {
        let m = TransformerLM::new(tiny()).unwrap();
        let cfg = SamplerConfig { max_new_tokens: 6, rng_seed: 5, ..Default::default() };
        let a = generate(&m, &[1, 2, 3], &cfg, None).unwrap();
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|s| s.starts_with(&[1, 2, 3]) && s.len() <= 9));
        assert_eq!(a, generate(&m, &[1, 2, 3], &cfg, None).unwrap());
        let stop = SamplerConfig { stop_token: Some(a[0][3]), ..cfg.clone() };
        let b = generate(&m, &[1, 2, 3], &stop, None).unwrap();
        assert_eq!(b[0], a[0][..4].to_vec());
        assert!(matches!(generate(&m, &[], &cfg, None), Err(Error::Input(_))));
        let long = SamplerConfig { max_new_tokens: 14, ..cfg };
        assert!(matches!(generate(&m, &[1, 2, 3], &long, None), Err(Error::Length { .. })));
    }

    #[test]
    fn top_k_one_equals_greedy() {
        let m = TransformerLM::new(tiny()).unwrap();
        let g = SamplerConfig { greedy: true, max_new_tokens: 8, num_samples: 2, ..Default::default() };
        let k1 = SamplerConfig { greedy: false, top_k: Some(1), rng_seed: 99, ..g.clone() };
        assert_eq!(generate(&m, &[4, 4], &g, None).unwrap(), generate(&m, &[4, 4], &k1, None).unwrap());
    }

    #[test]
    fn top_k_restricts_support() {
        let logits = [0.0, 5.0, 4.0, -1.0, 4.5];
        let cfg = SamplerConfig { top_k: Some(2), temperature: 10.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let t = sample_token(&logits, &cfg, &mut rng);
            assert!(t == 1 || t == 4);
        }
    }
}
