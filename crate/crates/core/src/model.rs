//! Decoder-only pre-LN transformer with learned positional embeddings and
//! an untied output head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CausalMask, Graph, Var};
use crate::optim::Adam;
use crate::peft::{prefix_attend, AdapterState, AdapterVars, QuantMatrix, Target};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::reference()
    }
}

impl ModelConfig {
    /// V=512, d=128, L=4, H=4, T=256.
    pub fn reference() -> Self {
        ModelConfig { vocab_size: 512, embed_dim: 128, n_layers: 4, n_heads: 4, context_len: 256, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_len", self.context_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.embed_dim ({}) must be divisible by model.n_heads ({})",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (v, d, l, t) = (self.vocab_size, self.embed_dim, self.n_layers, self.context_len);
        v * d + t * d + l * (12 * d * d + 4 * d) + 2 * d + d * v
    }
}

/// A weight matrix stored either densely or as quantized codes.
#[derive(Clone, Debug, PartialEq)]
pub enum Linear {
    Dense(Tensor),
    Quantized(QuantMatrix),
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        match self {
            Linear::Dense(t) => t.rows(),
            Linear::Quantized(q) => q.rows,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Linear::Dense(t) => t.cols(),
            Linear::Quantized(q) => q.cols,
        }
    }

    /// Dense row-major values; quantized matrices are dequantized.
    pub fn to_dense(&self) -> Vec<f64> {
        match self {
            Linear::Dense(t) => t.data().to_vec(),
            Linear::Quantized(q) => q.dequantize(),
        }
    }

    fn bind<'p>(&'p self, g: &mut Graph<'p>) -> Var {
        match self {
            Linear::Dense(t) => g.param(t),
            Linear::Quantized(q) => g.constant(q.dequantize(), q.rows, q.cols),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn linear(&self, t: Target) -> &Linear {
        match t {
            Target::Query => &self.wq,
            Target::Key => &self.wk,
            Target::Value => &self.wv,
            Target::Output => &self.wo,
            Target::Ff1 => &self.ff1,
            Target::Ff2 => &self.ff2,
        }
    }

    pub(crate) fn linear_mut(&mut self, t: Target) -> &mut Linear {
        match t {
            Target::Query => &mut self.wq,
            Target::Key => &mut self.wk,
            Target::Value => &mut self.wv,
            Target::Output => &mut self.wo,
            Target::Ff1 => &mut self.ff1,
            Target::Ff2 => &mut self.ff2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLM {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub head: Linear,
}

pub struct BlockVars {
    ln1: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2: (Var, Var),
    ff1: Var,
    ff2: Var,
}

/// Graph handles for every model tensor.
pub struct ModelVars {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    lnf: (Var, Var),
    head: Var,
}

impl ModelVars {
    /// Handles of dense tensors in [`TransformerLM::named_tensors`] order.
    pub fn dense_vars(&self, model: &TransformerLM) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for (b, bv) in model.blocks.iter().zip(&self.blocks) {
            out.extend([bv.ln1.0, bv.ln1.1]);
            for (lin, v) in [(&b.wq, bv.wq), (&b.wk, bv.wk), (&b.wv, bv.wv), (&b.wo, bv.wo)] {
                if matches!(lin, Linear::Dense(_)) {
                    out.push(v);
                }
            }
            out.extend([bv.ln2.0, bv.ln2.1]);
            for (lin, v) in [(&b.ff1, bv.ff1), (&b.ff2, bv.ff2)] {
                if matches!(lin, Linear::Dense(_)) {
                    out.push(v);
                }
            }
        }
        out.extend([self.lnf.0, self.lnf.1]);
        if matches!(model.head, Linear::Dense(_)) {
            out.push(self.head);
        }
        out
    }
}

impl TransformerLM {
    /// Gaussian(0, 0.02) weights, unit layer-norm gains, zero biases, all
    /// drawn from a generator seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, t, f) = (config.vocab_size, config.embed_dim, config.context_len, config.ff_dim());
        let dense = |r: usize, c: usize, rng: &mut ChaCha8Rng| Linear::Dense(Tensor::randn(&[r, c], INIT_STD, rng));
        let tok_emb = Tensor::randn(&[v, d], INIT_STD, &mut rng);
        let pos_emb = Tensor::randn(&[t, d], INIT_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: dense(d, d, &mut rng),
                wk: dense(d, d, &mut rng),
                wv: dense(d, d, &mut rng),
                wo: dense(d, d, &mut rng),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                ff1: dense(d, f, &mut rng),
                ff2: dense(f, d, &mut rng),
            })
            .collect();
        let head = dense(d, v, &mut rng);
        Ok(TransformerLM {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Tensor::filled(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            head,
        })
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.head, Linear::Quantized(_))
    }

    /// Dense tensors with stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1_gain"), &b.ln1_gain));
            out.push((format!("blocks.{i}.ln1_bias"), &b.ln1_bias));
            for (n, lin) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                if let Linear::Dense(t) = lin {
                    out.push((format!("blocks.{i}.{n}"), t));
                }
            }
            out.push((format!("blocks.{i}.ln2_gain"), &b.ln2_gain));
            out.push((format!("blocks.{i}.ln2_bias"), &b.ln2_bias));
            for (n, lin) in [("ff1", &b.ff1), ("ff2", &b.ff2)] {
                if let Linear::Dense(t) = lin {
                    out.push((format!("blocks.{i}.{n}"), t));
                }
            }
        }
        out.push(("lnf_gain".to_string(), &self.lnf_gain));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        if let Linear::Dense(t) = &self.head {
            out.push(("head".to_string(), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &mut self.tok_emb), ("pos_emb".to_string(), &mut self.pos_emb)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.ln1_gain"), &mut b.ln1_gain));
            out.push((format!("blocks.{i}.ln1_bias"), &mut b.ln1_bias));
            for (n, lin) in [("wq", &mut b.wq), ("wk", &mut b.wk), ("wv", &mut b.wv), ("wo", &mut b.wo)] {
                if let Linear::Dense(t) = lin {
                    out.push((format!("blocks.{i}.{n}"), t));
                }
            }
            out.push((format!("blocks.{i}.ln2_gain"), &mut b.ln2_gain));
            out.push((format!("blocks.{i}.ln2_bias"), &mut b.ln2_bias));
            for (n, lin) in [("ff1", &mut b.ff1), ("ff2", &mut b.ff2)] {
                if let Linear::Dense(t) = lin {
                    out.push((format!("blocks.{i}.{n}"), t));
                }
            }
        }
        out.push(("lnf_gain".to_string(), &mut self.lnf_gain));
        out.push(("lnf_bias".to_string(), &mut self.lnf_bias));
        if let Linear::Dense(t) = &mut self.head {
            out.push(("head".to_string(), t));
        }
        out
    }

    /// Marks every dense tensor trainable or frozen.
    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.requires_grad = trainable;
            t.zero_grad();
        }
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> ModelVars {
        let tok_emb = g.param(&self.tok_emb);
        let pos_emb = g.param(&self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1: (g.param(&b.ln1_gain), g.param(&b.ln1_bias)),
                wq: b.wq.bind(g),
                wk: b.wk.bind(g),
                wv: b.wv.bind(g),
                wo: b.wo.bind(g),
                ln2: (g.param(&b.ln2_gain), g.param(&b.ln2_bias)),
                ff1: b.ff1.bind(g),
                ff2: b.ff2.bind(g),
            })
            .collect();
        let lnf = (g.param(&self.lnf_gain), g.param(&self.lnf_bias));
        let head = self.head.bind(g);
        ModelVars { tok_emb, pos_emb, blocks, lnf, head }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::Length { len: tokens.len(), max: self.config.context_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass and returns logits `[t × V]`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        vars: &ModelVars,
        adapter: Option<&AdapterVars>,
        tokens: &[usize],
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (t, dh) = (tokens.len(), cfg.head_dim());
        let tok = g.embedding(vars.tok_emb, tokens)?;
        let pos = g.head_rows(vars.pos_emb, t)?;
        let mut x = g.add(tok, pos)?;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for (layer, bv) in vars.blocks.iter().enumerate() {
            let lora = |target: Target| adapter.and_then(|a| a.lora(layer, target));
            let h = g.layer_norm(x, bv.ln1.0, bv.ln1.1)?;
            let q = project(g, h, bv.wq, lora(Target::Query))?;
            let mut k = project(g, h, bv.wk, lora(Target::Key))?;
            let mut v = project(g, h, bv.wv, lora(Target::Value))?;
            if let Some([lk, lv, _]) = adapter.and_then(|a| a.ia3(layer)) {
                k = g.mul_row(k, lk)?;
                v = g.mul_row(v, lv)?;
            }
            let mut mask = CausalMask::plain();
            if let Some((pk, pv, visible)) = adapter.and_then(|a| a.prefix(layer)) {
                (k, v) = prefix_attend(g, k, v, pk, pv)?;
                mask = CausalMask { prefix: g.dims(pk).0, prefix_visible: visible };
            }
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, inv_sqrt);
                let att = g.causal_softmax(scores, mask)?;
                heads.push(g.matmul(att, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let o = project(g, cat, bv.wo, lora(Target::Output))?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, bv.ln2.0, bv.ln2.1)?;
            let mut u = project(g, h, bv.ff1, lora(Target::Ff1))?;
            u = g.gelu(u);
            if let Some([_, _, lf]) = adapter.and_then(|a| a.ia3(layer)) {
                u = g.mul_row(u, lf)?;
            }
            let f = project(g, u, bv.ff2, lora(Target::Ff2))?;
            x = g.add(x, f)?;
        }
        let h = g.layer_norm(x, vars.lnf.0, vars.lnf.1)?;
        g.matmul(h, vars.head)
    }

    /// Logits for `tokens` without recording gradients.
    pub fn logits(&self, tokens: &[usize], adapter: Option<&AdapterState>) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let av = adapter.map(|a| a.bind(&mut g));
        let out = self.forward(&mut g, &vars, av.as_ref(), tokens)?;
        Ok(g.to_tensor(out))
    }

    /// Next-token log-probabilities, `[t × V]` row-major.
    pub fn log_probs(&self, tokens: &[usize], adapter: Option<&AdapterState>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let av = adapter.map(|a| a.bind(&mut g));
        let out = self.forward(&mut g, &vars, av.as_ref(), tokens)?;
        let lp = g.log_softmax(out)?;
        Ok(g.value(lp).to_vec())
    }
}

/// `x·W`, plus the LoRA path `s·(x·A)·B` when present.
pub(crate) fn project(g: &mut Graph<'_>, x: Var, w: Var, lora: Option<(Var, Var, f64)>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match lora {
        None => Ok(y),
        Some((a, b, s)) => {
            let xa = g.matmul(x, a)?;
            let xab = g.matmul(xa, b)?;
            let xab = g.scale(xab, s);
            g.add(y, xab)
        }
    }
}

/// Mean next-token NLL of `seq` with uniform weights. Requires `len ≥ 2`.
pub fn sequence_nll(
    model: &TransformerLM,
    g: &mut Graph<'_>,
    vars: &ModelVars,
    adapter: Option<&AdapterVars>,
    seq: &[usize],
) -> Result<Var> {
    if seq.len() < 2 {
        return Err(Error::Input("sequence needs at least 2 tokens".into()));
    }
    let inputs = &seq[..seq.len() - 1];
    let logits = model.forward(g, vars, adapter, inputs)?;
    let lp = g.log_softmax(logits)?;
    g.weighted_nll(lp, &seq[1..], &vec![1.0; inputs.len()])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Full-model language-model training. Returns the mean per-sequence loss of
/// every epoch. The corpus order is reshuffled each epoch from `cfg.seed`.
pub fn train_base(
    model: &mut TransformerLM,
    corpus: &[Vec<usize>],
    cfg: &TrainBaseConfig,
    opt: &mut Adam,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("training.batch_size must be >= 1".into()));
    }
    for seq in corpus {
        if seq.len() < 2 {
            return Err(Error::Input("training sequence needs at least 2 tokens".into()));
        }
        model.check_tokens(&seq[..seq.len() - 1])?;
    }
    model.set_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = Vec::new();
            for &i in batch {
                let (loss, grads) = {
                    let mut g = Graph::new();
                    let vars = model.bind(&mut g);
                    let l = sequence_nll(model, &mut g, &vars, None, &corpus[i])?;
                    let grads = g.backward(l)?;
                    let per: Vec<Vec<f64>> = vars
                        .dense_vars(model)
                        .iter()
                        .zip(model.named_tensors())
                        .map(|(&v, (_, t))| grads.get(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
                        .collect();
                    (g.scalar(l), per)
                };
                total += loss;
                if acc.is_empty() {
                    acc = grads;
                } else {
                    for (a, gr) in acc.iter_mut().zip(&grads) {
                        a.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let mut params = model.named_tensors_mut();
            for ((_, t), a) in params.iter_mut().zip(&acc) {
                t.zero_grad();
                let scaled: Vec<f64> = a.iter().map(|x| x * inv).collect();
                t.accumulate_grad(&scaled)?;
            }
            opt.step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)))?;
        }
        let mean = total / corpus.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch} loss is not finite")));
        }
        on_epoch(epoch, mean);
        trace.push(mean);
    }
    model.set_trainable(false);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 11, embed_dim: 8, n_layers: 2, n_heads: 2, context_len: 12, seed: 7 }
    }

    #[test]
    fn reference_param_count() {
        assert_eq!(ModelConfig::reference().param_count(), 952_576);
        let m = TransformerLM::new(tiny()).unwrap();
        let n: usize = m.named_tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(n, tiny().param_count());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("n_heads")));
    }

    #[test]
    fn logits_shape_and_errors() {
        let m = TransformerLM::new(tiny()).unwrap();
        let l = m.logits(&[1, 2, 3], None).unwrap();
        assert_eq!(l.shape(), &[3, 11]);
        assert!(matches!(m.logits(&[11], None), Err(Error::Input(_))));
        assert!(matches!(m.logits(&[0; 13], None), Err(Error::Length { len: 13, max: 12 })));
    }

    #[test]
    fn causality_bitwise() {
        let m = TransformerLM::new(tiny()).unwrap();
        let a = m.logits(&[1, 2, 3, 4, 5], None).unwrap();
        let b = m.logits(&[1, 2, 3, 4, 9], None).unwrap();
        assert_eq!(&a.data()[..4 * 11], &b.data()[..4 * 11]);
        assert_ne!(&a.data()[4 * 11..], &b.data()[4 * 11..]);
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = TransformerLM::new(tiny()).unwrap();
        m.head = Linear::Dense(Tensor::zeros(&[8, 11]));
        let lp = m.log_probs(&[1, 2, 3], None).unwrap();
        for x in lp {
            assert!((x + (11f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = TransformerLM::new(tiny()).unwrap().logits(&[3, 1, 4, 1, 5], None).unwrap();
        let b = TransformerLM::new(tiny()).unwrap().logits(&[3, 1, 4, 1, 5], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_leaves_parameters() {
        let mut m = TransformerLM::new(tiny()).unwrap();
        let before = m.clone();
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        let cfg = TrainBaseConfig { epochs: 0, batch_size: 1, seed: 1 };
        let trace = train_base(&mut m, &[vec![1, 2, 3]], &cfg, &mut opt, |_, _| {}).unwrap();
        assert!(trace.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn memorizes_one_sequence() {
        let mut m = TransformerLM::new(tiny()).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2)).unwrap();
        let cfg = TrainBaseConfig { epochs: 150, batch_size: 1, seed: 1 };
        let trace = train_base(&mut m, &[vec![1, 5, 2, 7, 3, 9]], &cfg, &mut opt, |_, _| {}).unwrap();
        assert!(*trace.last().unwrap() < 0.1, "{:?}", &trace[trace.len() - 3..]);
        assert!(trace.last() < trace.first());
    }

    #[test]
    fn loss_trace_reproduces() {
        let run = || {
            let mut m = TransformerLM::new(tiny()).unwrap();
            let mut opt = Adam::new(AdamConfig::with_lr(1e-2)).unwrap();
            let cfg = TrainBaseConfig { epochs: 3, batch_size: 2, seed: 4 };
            let corpus = vec![vec![1, 2, 3], vec![4, 5, 6, 7], vec![8, 9, 10]];
            train_base(&mut m, &corpus, &cfg, &mut opt, |_, _| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn model_gradients_pass_finite_differences() {
        let mut m = TransformerLM::new(tiny()).unwrap();
        m.set_trainable(true);
        let params: Vec<&Tensor> = m.named_tensors().into_iter().map(|(_, t)| t).collect();
        // Spot-check a few entries per tensor to keep the runtime small.
        let entries: Vec<(usize, usize)> =
            params.iter().enumerate().flat_map(|(p, t)| [0, t.len() / 2, t.len() - 1].map(|i| (p, i))).collect();
        let report = crate::gradcheck::check_gradients_at(&params, 1e-5, Some(&entries), |g, v| {
            let shell = rebind(&m.config, v);
            sequence_nll(&m, g, &shell, None, &[1, 4, 2, 8, 5])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    /// Rebuilds `ModelVars` from a flat handle list in `named_tensors` order.
    fn rebind(cfg: &ModelConfig, v: &[Var]) -> ModelVars {
        let mut it = v.iter().copied();
        let mut next = || it.next().unwrap();
        let tok_emb = next();
        let pos_emb = next();
        let blocks = (0..cfg.n_layers)
            .map(|_| {
                let ln1 = (next(), next());
                let (wq, wk, wv, wo) = (next(), next(), next(), next());
                let ln2 = (next(), next());
                let (ff1, ff2) = (next(), next());
                BlockVars { ln1, wq, wk, wv, wo, ln2, ff1, ff2 }
            })
            .collect();
        let lnf = (next(), next());
        let head = next();
        ModelVars { tok_emb, pos_emb, blocks, lnf, head }
    }
}
