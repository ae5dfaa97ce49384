//! Parameter-efficient adapters over a frozen [`TransformerLM`]: LoRA, IA3,
//! prefix key/value banks, and LoRA over a quantized base.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Linear, ModelConfig, TransformerLM, INIT_STD};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Query,
    Key,
    Value,
    Output,
    Ff1,
    Ff2,
}

impl Target {
    pub const ALL: [Target; 6] = [Target::Query, Target::Key, Target::Value, Target::Output, Target::Ff1, Target::Ff2];

    pub fn name(self) -> &'static str {
        match self {
            Target::Query => "query",
            Target::Key => "key",
            Target::Value => "value",
            Target::Output => "output",
            Target::Ff1 => "ff1",
            Target::Ff2 => "ff2",
        }
    }

    /// `(in, out)` dimensions of the projection for `cfg`.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        let (d, f) = (cfg.embed_dim, cfg.ff_dim());
        match self {
            Target::Ff1 => (d, f),
            Target::Ff2 => (f, d),
            _ => (d, d),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Ia3,
    Prefix,
    Qlora,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Ia3 => "ia3",
            AdapterKind::Prefix => "prefix",
            AdapterKind::Qlora => "qlora",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(AdapterKind::Lora),
            "ia3" => Ok(AdapterKind::Ia3),
            "prefix" => Ok(AdapterKind::Prefix),
            "qlora" => Ok(AdapterKind::Qlora),
            other => Err(Error::Config(format!("adapter.kind: unknown adapter '{other}'"))),
        }
    }
}

fn default_rank() -> usize {
    4
}
fn default_alpha() -> f64 {
    8.0
}
fn default_prefix_len() -> usize {
    20
}
fn default_bits() -> u8 {
    8
}
fn default_targets() -> Vec<Target> {
    vec![Target::Query, Target::Value]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_prefix_len")]
    pub prefix_len: usize,
    #[serde(default = "default_bits")]
    pub quant_bits: u8,
    #[serde(default = "default_targets")]
    pub targets: Vec<Target>,
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind) -> Self {
        AdapterSpec {
            kind,
            rank: default_rank(),
            alpha: default_alpha(),
            prefix_len: default_prefix_len(),
            quant_bits: default_bits(),
            targets: default_targets(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn uses_lora(&self) -> bool {
        matches!(self.kind, AdapterKind::Lora | AdapterKind::Qlora)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.uses_lora() {
            if self.rank == 0 || self.rank > cfg.embed_dim {
                return Err(Error::Spec(format!(
                    "rank {} must lie in 1..={} (embed_dim)",
                    self.rank, cfg.embed_dim
                )));
            }
            if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                return Err(Error::Spec(format!("alpha must be positive, got {}", self.alpha)));
            }
            if self.targets.is_empty() {
                return Err(Error::Spec("LoRA needs at least one target projection".into()));
            }
            let mut seen = self.targets.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != self.targets.len() {
                return Err(Error::Spec("duplicate LoRA target".into()));
            }
        }
        if self.kind == AdapterKind::Prefix && self.prefix_len == 0 {
            return Err(Error::Spec("prefix_len must be >= 1".into()));
        }
        if self.kind == AdapterKind::Qlora && !matches!(self.quant_bits, 4 | 8) {
            return Err(Error::Spec(format!("quant_bits must be 4 or 8, got {}", self.quant_bits)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub target: Target,
    /// `[in × r]`
    pub a: Tensor,
    /// `[r × out]`
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ia3Scales {
    pub key: Tensor,
    pub value: Tensor,
    pub ff: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixBank {
    /// `[p × d]`
    pub keys: Tensor,
    /// `[p × d]`
    pub values: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdapterParams {
    Lora(Vec<Vec<LoraPair>>),
    Ia3(Vec<Ia3Scales>),
    Prefix(Vec<PrefixBank>),
}

/// The trainable hotfix: adapter tensors plus the spec and the fingerprint of
/// the base model they were trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub spec: AdapterSpec,
    pub base_fingerprint: u64,
    pub params: AdapterParams,
}

/// Builds fresh adapter tensors: LoRA `A ~ N(0, 0.02)`, `B = 0`; IA3 scales
/// of one; prefix banks `~ N(0, 0.02)`.
pub fn init_adapter(spec: &AdapterSpec, config: &ModelConfig, seed: u64) -> Result<AdapterState> {
    spec.validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f, l) = (config.embed_dim, config.ff_dim(), config.n_layers);
    let params = match spec.kind {
        AdapterKind::Lora | AdapterKind::Qlora => AdapterParams::Lora(
            (0..l)
                .map(|_| {
                    spec.targets
                        .iter()
                        .map(|&target| {
                            let (i, o) = target.dims(config);
                            LoraPair {
                                target,
                                a: Tensor::randn(&[i, spec.rank], INIT_STD, &mut rng).trainable(),
                                b: Tensor::zeros(&[spec.rank, o]).trainable(),
                            }
                        })
                        .collect()
                })
                .collect(),
        ),
        AdapterKind::Ia3 => AdapterParams::Ia3(
            (0..l)
                .map(|_| Ia3Scales {
                    key: Tensor::filled(&[d], 1.0).trainable(),
                    value: Tensor::filled(&[d], 1.0).trainable(),
                    ff: Tensor::filled(&[f], 1.0).trainable(),
                })
                .collect(),
        ),
        AdapterKind::Prefix => AdapterParams::Prefix(
            (0..l)
                .map(|_| PrefixBank {
                    keys: Tensor::randn(&[spec.prefix_len, d], INIT_STD, &mut rng).trainable(),
                    values: Tensor::randn(&[spec.prefix_len, d], INIT_STD, &mut rng).trainable(),
                })
                .collect(),
        ),
    };
    Ok(AdapterState { spec: spec.clone(), base_fingerprint: 0, params })
}

impl AdapterState {
    pub fn with_fingerprint(mut self, fingerprint: u64) -> Self {
        self.base_fingerprint = fingerprint;
        self
    }

    /// Fails unless this adapter was trained against a base with `fingerprint`.
    pub fn check_base(&self, fingerprint: u64) -> Result<()> {
        if self.base_fingerprint != fingerprint {
            return Err(Error::Compatibility(format!(
                "adapter was trained against base {:016x} but the loaded base is {:016x}",
                self.base_fingerprint, fingerprint
            )));
        }
        Ok(())
    }

    /// Fails unless the adapter's shapes fit `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let layers = match &self.params {
            AdapterParams::Lora(l) => l.len(),
            AdapterParams::Ia3(l) => l.len(),
            AdapterParams::Prefix(l) => l.len(),
        };
        let fresh = init_adapter(&self.spec, config, 0)?;
        let shapes = |s: &AdapterState| s.named_tensors().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>();
        if layers != config.n_layers || shapes(self) != shapes(&fresh) {
            return Err(Error::Compatibility("adapter tensor shapes do not fit the base model".into()));
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.params {
            AdapterParams::Lora(layers) => {
                for (i, pairs) in layers.iter().enumerate() {
                    for p in pairs {
                        out.push((format!("blocks.{i}.{}.lora_a", p.target.name()), &p.a));
                        out.push((format!("blocks.{i}.{}.lora_b", p.target.name()), &p.b));
                    }
                }
            }
            AdapterParams::Ia3(layers) => {
                for (i, s) in layers.iter().enumerate() {
                    out.push((format!("blocks.{i}.ia3_key"), &s.key));
                    out.push((format!("blocks.{i}.ia3_value"), &s.value));
                    out.push((format!("blocks.{i}.ia3_ff"), &s.ff));
                }
            }
            AdapterParams::Prefix(layers) => {
                for (i, b) in layers.iter().enumerate() {
                    out.push((format!("blocks.{i}.prefix_keys"), &b.keys));
                    out.push((format!("blocks.{i}.prefix_values"), &b.values));
                }
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match &mut self.params {
            AdapterParams::Lora(layers) => {
                for (i, pairs) in layers.iter_mut().enumerate() {
                    for p in pairs {
                        let n = p.target.name();
                        out.push((format!("blocks.{i}.{n}.lora_a"), &mut p.a));
                        out.push((format!("blocks.{i}.{n}.lora_b"), &mut p.b));
                    }
                }
            }
            AdapterParams::Ia3(layers) => {
                for (i, s) in layers.iter_mut().enumerate() {
                    out.push((format!("blocks.{i}.ia3_key"), &mut s.key));
                    out.push((format!("blocks.{i}.ia3_value"), &mut s.value));
                    out.push((format!("blocks.{i}.ia3_ff"), &mut s.ff));
                }
            }
            AdapterParams::Prefix(layers) => {
                for (i, b) in layers.iter_mut().enumerate() {
                    out.push((format!("blocks.{i}.prefix_keys"), &mut b.keys));
                    out.push((format!("blocks.{i}.prefix_values"), &mut b.values));
                }
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> AdapterVars {
        let vars: Vec<Var> = self.named_tensors().into_iter().map(|(_, t)| g.param(t)).collect();
        self.bind_with(&vars)
    }

    /// Arranges `vars` (one handle per tensor, in [`Self::named_tensors`]
    /// order) into the layout the model forward expects.
    pub fn bind_with(&self, vars: &[Var]) -> AdapterVars {
        assert_eq!(vars.len(), self.named_tensors().len(), "one handle per adapter tensor");
        let mut it = vars.iter().copied();
        let mut next = || it.next().unwrap();
        match &self.params {
            AdapterParams::Lora(layers) => AdapterVars::Lora {
                scale: self.spec.scale(),
                layers: layers.iter().map(|pairs| pairs.iter().map(|p| (p.target, next(), next())).collect()).collect(),
            },
            AdapterParams::Ia3(layers) => {
                AdapterVars::Ia3 { layers: layers.iter().map(|_| [next(), next(), next()]).collect() }
            }
            AdapterParams::Prefix(layers) => {
                AdapterVars::Prefix { layers: layers.iter().map(|_| (next(), next())).collect(), visible: true }
            }
        }
    }
}

/// Graph handles for adapter tensors, consulted by the model forward.
pub enum AdapterVars {
    Lora { scale: f64, layers: Vec<Vec<(Target, Var, Var)>> },
    Ia3 { layers: Vec<[Var; 3]> },
    /// With `visible = false` every prefix slot is masked out of attention.
    Prefix { layers: Vec<(Var, Var)>, visible: bool },
}

impl AdapterVars {
    pub fn lora(&self, layer: usize, target: Target) -> Option<(Var, Var, f64)> {
        match self {
            AdapterVars::Lora { scale, layers } => {
                layers[layer].iter().find(|(t, _, _)| *t == target).map(|&(_, a, b)| (a, b, *scale))
            }
            _ => None,
        }
    }

    /// `[key, value, ff]` scale handles.
    pub fn ia3(&self, layer: usize) -> Option<[Var; 3]> {
        match self {
            AdapterVars::Ia3 { layers } => Some(layers[layer]),
            _ => None,
        }
    }

    pub fn prefix(&self, layer: usize) -> Option<(Var, Var, bool)> {
        match self {
            AdapterVars::Prefix { layers, visible } => Some((layers[layer].0, layers[layer].1, *visible)),
            _ => None,
        }
    }

    /// All adapter handles in [`AdapterState::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        match self {
            AdapterVars::Lora { layers, .. } => layers.iter().flatten().flat_map(|&(_, a, b)| [a, b]).collect(),
            AdapterVars::Ia3 { layers } => layers.iter().flatten().copied().collect(),
            AdapterVars::Prefix { layers, .. } => layers.iter().flat_map(|&(k, v)| [k, v]).collect(),
        }
    }
}

/// `x·W + (alpha/r)·(x·A)·B`.
pub fn adapted_projection(g: &mut Graph<'_>, w: Var, x: Var, a: Var, b: Var, alpha: f64, r: usize) -> Result<Var> {
    let (wi, wo) = g.dims(w);
    let (ai, ar) = g.dims(a);
    let (br, bo) = g.dims(b);
    if ai != wi || bo != wo || ar != r || br != r {
        return Err(Error::Shape(format!(
            "LoRA shapes W [{wi}, {wo}], A [{ai}, {ar}], B [{br}, {bo}] with rank {r}"
        )));
    }
    crate::model::project(g, x, w, Some((a, b, alpha / r as f64)))
}

/// Prepends prefix rows to the layer's keys and values: `[p+t × d]` each.
pub fn prefix_attend(g: &mut Graph<'_>, keys: Var, values: Var, prefix_keys: Var, prefix_values: Var) -> Result<(Var, Var)> {
    Ok((g.concat_rows(&[prefix_keys, keys])?, g.concat_rows(&[prefix_values, values])?))
}

/// Per-row symmetric absmax quantized matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub codes: Vec<i8>,
    pub scales: Vec<f64>,
}

impl QuantMatrix {
    pub fn qmax(bits: u8) -> i32 {
        (1 << (bits - 1)) - 1
    }

    /// `scale = max|row| / qmax`, `code = round(w / scale)`.
    pub fn quantize(data: &[f64], rows: usize, cols: usize, bits: u8) -> Result<Self> {
        if !matches!(bits, 4 | 8) {
            return Err(Error::Spec(format!("quant_bits must be 4 or 8, got {bits}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("quantize: {} values for [{rows}, {cols}]", data.len())));
        }
        let qmax = Self::qmax(bits);
        let mut codes = Vec::with_capacity(data.len());
        let mut scales = Vec::with_capacity(rows);
        for row in data.chunks(cols) {
            let amax = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = amax / qmax as f64;
            scales.push(scale);
            for &v in row {
                let c = if scale == 0.0 { 0 } else { (v / scale).round().clamp(-qmax as f64, qmax as f64) as i8 };
                codes.push(c);
            }
        }
        Ok(QuantMatrix { rows, cols, bits, codes, scales })
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes
            .chunks(self.cols)
            .zip(&self.scales)
            .flat_map(|(row, &s)| row.iter().map(move |&c| c as f64 * s))
            .collect()
    }
}

/// Copy of `model` with every projection and the output head stored as
/// `bits`-bit codes. Embeddings and layer norms stay in full precision.
pub fn quantize_base(model: &TransformerLM, bits: u8) -> Result<TransformerLM> {
    let mut out = model.clone();
    let quant = |lin: &Linear| -> Result<Linear> {
        match lin {
            Linear::Dense(t) => Ok(Linear::Quantized(QuantMatrix::quantize(t.data(), t.rows(), t.cols(), bits)?)),
            Linear::Quantized(q) => Ok(Linear::Quantized(q.clone())),
        }
    };
    for b in &mut out.blocks {
        for t in Target::ALL {
            let q = quant(b.linear(t))?;
            *b.linear_mut(t) = q;
        }
    }
    out.head = quant(&out.head)?;
    out.set_trainable(false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 11, embed_dim: 8, n_layers: 2, n_heads: 2, context_len: 12, seed: 7 }
    }

    /// Test-only dense merge `W + (alpha/r)·A·B`.
    fn dense_merge(w: &[f64], a: &[f64], b: &[f64], i: usize, r: usize, o: usize, alpha: f64) -> Vec<f64> {
        let mut out = w.to_vec();
        for x in 0..i {
            for y in 0..o {
                let mut s = 0.0;
                for k in 0..r {
                    s += a[x * r + k] * b[k * o + y];
                }
                out[x * o + y] += alpha / r as f64 * s;
            }
        }
        out
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn reference_trainable_counts() {
        let cfg = ModelConfig::reference();
        let lora = init_adapter(&AdapterSpec::new(AdapterKind::Lora), &cfg, 0).unwrap();
        let ia3 = init_adapter(&AdapterSpec::new(AdapterKind::Ia3), &cfg, 0).unwrap();
        let prefix = init_adapter(&AdapterSpec::new(AdapterKind::Prefix), &cfg, 0).unwrap();
        // L · |targets| · (d·r + r·d)
        assert_eq!(lora.trainable_count(), 4 * 2 * (128 * 4 + 4 * 128));
        // L · (d + d + 4d)
        assert_eq!(ia3.trainable_count(), 4 * 6 * 128);
        // L · 2 · p · d
        assert_eq!(prefix.trainable_count(), 4 * 2 * 20 * 128);
        assert!(ia3.trainable_count() < lora.trainable_count());
        for s in [&lora, &ia3, &prefix] {
            assert!(s.trainable_count() * 10 < cfg.param_count());
        }
    }

    #[test]
    fn spec_validation() {
        let cfg = tiny();
        let mut s = AdapterSpec::new(AdapterKind::Lora);
        s.rank = 9;
        assert!(matches!(init_adapter(&s, &cfg, 0), Err(Error::Spec(_))));
        let mut s = AdapterSpec::new(AdapterKind::Qlora);
        s.quant_bits = 6;
        assert!(s.validate(&cfg).is_err());
        let mut s = AdapterSpec::new(AdapterKind::Prefix);
        s.prefix_len = 0;
        assert!(s.validate(&cfg).is_err());
    }

    #[test]
    fn fresh_lora_and_ia3_are_identity_bitwise() {
        let m = TransformerLM::new(tiny()).unwrap();
        let base = m.logits(&[1, 2, 3, 4], None).unwrap();
        for kind in [AdapterKind::Lora, AdapterKind::Ia3] {
            let mut spec = AdapterSpec::new(kind);
            spec.targets = Target::ALL.to_vec();
            let a = init_adapter(&spec, &m.config, 3).unwrap();
            assert_eq!(m.logits(&[1, 2, 3, 4], Some(&a)).unwrap(), base, "{kind:?}");
        }
    }

    #[test]
    fn masked_prefix_is_identity() {
        let m = TransformerLM::new(tiny()).unwrap();
        let mut a = init_adapter(&AdapterSpec::new(AdapterKind::Prefix), &m.config, 3).unwrap();
        for (_, t) in a.named_tensors_mut() {
            if t.len() > 0 {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let tokens = [1, 2, 3, 4, 5];
        let base = m.logits(&tokens, None).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let mut av = a.bind(&mut g);
        if let AdapterVars::Prefix { visible, .. } = &mut av {
            *visible = false;
        }
        let out = m.forward(&mut g, &vars, Some(&av), &tokens).unwrap();
        assert_eq!(g.value(out), base.data());
    }

    #[test]
    fn prefix_scores_have_extended_width() {
        let m = TransformerLM::new(tiny()).unwrap();
        let a = init_adapter(&AdapterSpec::new(AdapterKind::Prefix), &m.config, 3).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let av = a.bind(&mut g);
        m.forward(&mut g, &vars, Some(&av), &[1, 2, 3]).unwrap();
        // Every causal softmax in the tape spans prefix slots plus the sequence.
        let widths: Vec<(usize, usize)> =
            g.vars().map(|v| g.dims(v)).filter(|&(r, c)| r == 3 && c == 3 + 20).collect();
        // raw scores, scaled scores and attention weights, per head per layer
        assert_eq!(widths.len(), 3 * 2 * 2);
    }

    #[test]
    fn prefix_gradient_reaches_every_slot() {
        let m = TransformerLM::new(tiny()).unwrap();
        let a = init_adapter(&AdapterSpec::new(AdapterKind::Prefix), &m.config, 5).unwrap();
        let tensors: Vec<&Tensor> = a.named_tensors().into_iter().map(|(_, t)| t).collect();
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let av = a.bind(&mut g);
        let l = crate::model::sequence_nll(&m, &mut g, &vars, Some(&av), &[1, 2, 3, 4]).unwrap();
        let grads = g.backward(l).unwrap();
        let keys = grads.get(av.vars()[0]).unwrap();
        for slot in 0..20 {
            assert!(keys[slot * 8..(slot + 1) * 8].iter().any(|&x| x != 0.0), "slot {slot}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entries: Vec<(usize, usize)> = (0..4).map(|_| (rng.random_range(0..4), rng.random_range(0..160))).collect();
        let report = crate::gradcheck::check_gradients_at(&tensors, 1e-5, Some(&entries), |g, v| {
            let vars = m.bind(g);
            let av = AdapterVars::Prefix { layers: vec![(v[0], v[1]), (v[2], v[3])], visible: true };
            crate::model::sequence_nll(&m, g, &vars, Some(&av), &[1, 2, 3, 4])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn adapted_projection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, d, r) = (3, 5, 2);
        let x = rand_tensor(&[t, d], &mut rng);
        let w = rand_tensor(&[d, d], &mut rng);
        let a = rand_tensor(&[d, r], &mut rng);
        let b = rand_tensor(&[r, d], &mut rng);
        let zero_b = Tensor::zeros(&[r, d]);
        let zero_w = Tensor::zeros(&[d, d]);

        let mut g = Graph::new();
        let (xv, wv, av, bv, zb, zw) = (g.param(&x), g.param(&w), g.param(&a), g.param(&b), g.param(&zero_b), g.param(&zero_w));
        let plain = g.matmul(xv, wv).unwrap();
        let y = adapted_projection(&mut g, wv, xv, av, zb, 8.0, r).unwrap();
        assert_eq!(g.value(y), g.value(plain));

        let xa = g.matmul(xv, av).unwrap();
        let xab = g.matmul(xa, bv).unwrap();
        let y = adapted_projection(&mut g, zw, xv, av, bv, r as f64, r).unwrap();
        assert_eq!(g.value(y), g.value(xab));

        let merged = dense_merge(w.data(), a.data(), b.data(), d, r, d, 8.0);
        let y = adapted_projection(&mut g, wv, xv, av, bv, 8.0, r).unwrap();
        let mv = g.constant(merged, d, d);
        let want = g.matmul(xv, mv).unwrap();
        for (p, q) in g.value(y).iter().zip(g.value(want)) {
            assert!((p - q).abs() < 1e-10);
        }
        assert!(matches!(adapted_projection(&mut g, wv, xv, av, bv, 8.0, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn lora_gradient_only_reaches_adapter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[4, 4], &mut rng);
        let a = rand_tensor(&[4, 2], &mut rng).trainable();
        let b = rand_tensor(&[2, 4], &mut rng).trainable();
        let mut g = Graph::new();
        let (xv, wv, av, bv) = (g.param(&x), g.param(&w), g.param(&a), g.param(&b));
        let y = adapted_projection(&mut g, wv, xv, av, bv, 8.0, 2).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(wv).is_none() && grads.get(xv).is_none());
        assert!(grads.get(av).is_some() && grads.get(bv).is_some());
        let report = check_gradients(&[&a, &b], 1e-5, |g, v| {
            let (xv, wv) = (g.param(&x), g.param(&w));
            let y = adapted_projection(g, wv, xv, v[0], v[1], 8.0, 2)?;
            let y = g.gelu(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4);
    }

    #[test]
    fn quantization_bounds() {
        let zeros = QuantMatrix::quantize(&[0.0; 6], 2, 3, 8).unwrap();
        assert_eq!(zeros.dequantize(), vec![0.0; 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for bits in [8u8, 4] {
            let w = Tensor::randn(&[16, 32], 0.02, &mut rng);
            let q = QuantMatrix::quantize(w.data(), 16, 32, bits).unwrap();
            let back = q.dequantize();
            for (r, row) in w.data().chunks(32).enumerate() {
                let amax = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let scale = amax / QuantMatrix::qmax(bits) as f64;
                assert_eq!(q.scales[r], scale);
                for (c, v) in row.iter().enumerate() {
                    assert!((back[r * 32 + c] - v).abs() <= scale / 2.0 * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn quantized_base_keeps_embeddings() {
        let m = TransformerLM::new(tiny()).unwrap();
        let q = quantize_base(&m, 8).unwrap();
        assert!(q.is_quantized());
        assert_eq!(q.tok_emb, m.tok_emb);
        let a = m.logits(&[1, 2, 3], None).unwrap();
        let b = q.logits(&[1, 2, 3], None).unwrap();
        let diff = a.data().iter().zip(b.data()).fold(0.0f64, |mx, (x, y)| mx.max((x - y).abs()));
        assert!(diff > 0.0 && diff < 1e-2, "{diff}");
    }

    #[test]
    fn fingerprint_mismatch_is_reported() {
        let a = init_adapter(&AdapterSpec::new(AdapterKind::Ia3), &tiny(), 0).unwrap().with_fingerprint(42);
        assert!(a.check_base(42).is_ok());
        assert!(matches!(a.check_base(43), Err(Error::Compatibility(_))));
    }
}
