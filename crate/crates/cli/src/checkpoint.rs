//! HFX1 files: `b"HFX1"`, a little-endian `u32` metadata length, UTF-8 JSON
//! metadata with the tensor manifest, then every manifest tensor's payload in
//! manifest order.
//!
//! Payload encodings: `f64` is 8 little-endian bytes per value, `i8` one
//! byte per code, `i4` two codes per byte (low nibble first, odd counts
//! padded with a zero nibble).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use hotfix_core::fnv::{fnv1a64, Fnv1a};
use hotfix_core::model::{Linear, ModelConfig, TransformerLM};
use hotfix_core::peft::{AdapterKind, AdapterParams, AdapterSpec, AdapterState, QuantMatrix};
use hotfix_core::error::read_file;
use hotfix_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"HFX1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Base,
    Adapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    I8,
    I4,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

impl ManifestEntry {
    fn count(&self) -> usize {
        self.shape.iter().product()
    }

    fn byte_len(&self) -> usize {
        match self.dtype {
            Dtype::F64 => self.count() * 8,
            Dtype::I8 => self.count(),
            Dtype::I4 => self.count().div_ceil(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub format_version: u32,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_spec: Option<AdapterSpec>,
    /// Adapters only: FNV-1a of the payload of the base they were trained on,
    /// as 16 lowercase hex digits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_fingerprint: Option<String>,
    pub tensors: Vec<ManifestEntry>,
}

enum Data<'a> {
    F64(&'a [f64]),
    Codes(&'a [i8], u8),
}

struct Writer<'a> {
    manifest: Vec<ManifestEntry>,
    data: Vec<Data<'a>>,
}

impl<'a> Writer<'a> {
    fn new() -> Self {
        Writer { manifest: Vec::new(), data: Vec::new() }
    }

    fn tensor(&mut self, name: String, t: &'a Tensor) {
        self.manifest.push(ManifestEntry { name, shape: t.shape().to_vec(), dtype: Dtype::F64 });
        self.data.push(Data::F64(t.data()));
    }

    fn linear(&mut self, name: String, lin: &'a Linear) {
        match lin {
            Linear::Dense(t) => self.tensor(name, t),
            Linear::Quantized(q) => {
                let dtype = if q.bits == 4 { Dtype::I4 } else { Dtype::I8 };
                self.manifest.push(ManifestEntry { name: format!("{name}.codes"), shape: vec![q.rows, q.cols], dtype });
                self.data.push(Data::Codes(&q.codes, q.bits));
                self.manifest.push(ManifestEntry { name: format!("{name}.scales"), shape: vec![q.rows], dtype: Dtype::F64 });
                self.data.push(Data::F64(&q.scales));
            }
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.manifest.iter().map(ManifestEntry::byte_len).sum());
        for d in &self.data {
            match *d {
                Data::F64(xs) => xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::Codes(cs, 8) => out.extend(cs.iter().map(|&c| c as u8)),
                Data::Codes(cs, _) => {
                    for pair in cs.chunks(2) {
                        let lo = pair[0] as u8 & 0x0f;
                        let hi = pair.get(1).map_or(0, |&c| c as u8 & 0x0f);
                        out.push(lo | hi << 4);
                    }
                }
            }
        }
        out
    }
}

fn encode(meta: &Metadata, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("metadata larger than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

fn model_writer(model: &TransformerLM) -> Writer<'_> {
    let mut w = Writer::new();
    w.tensor("tok_emb".into(), &model.tok_emb);
    w.tensor("pos_emb".into(), &model.pos_emb);
    for (i, b) in model.blocks.iter().enumerate() {
        w.tensor(format!("blocks.{i}.ln1_gain"), &b.ln1_gain);
        w.tensor(format!("blocks.{i}.ln1_bias"), &b.ln1_bias);
        for (n, lin) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
            w.linear(format!("blocks.{i}.{n}"), lin);
        }
        w.tensor(format!("blocks.{i}.ln2_gain"), &b.ln2_gain);
        w.tensor(format!("blocks.{i}.ln2_bias"), &b.ln2_bias);
        w.linear(format!("blocks.{i}.ff1"), &b.ff1);
        w.linear(format!("blocks.{i}.ff2"), &b.ff2);
    }
    w.tensor("lnf_gain".into(), &model.lnf_gain);
    w.tensor("lnf_bias".into(), &model.lnf_bias);
    w.linear("head".into(), &model.head);
    w
}

/// FNV-1a over the bytes the model's payload serializes to.
pub fn fingerprint(model: &TransformerLM) -> u64 {
    let w = model_writer(model);
    let mut h = Fnv1a::default();
    h.update(&w.payload());
    h.finish()
}

pub fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

fn parse_fingerprint(s: &str) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|_| Error::Format(format!("bad fingerprint {s:?}")))
}

pub fn encode_base(model: &TransformerLM) -> Result<Vec<u8>> {
    let w = model_writer(model);
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        kind: Kind::Base,
        model_config: Some(model.config.clone()),
        adapter_spec: None,
        base_fingerprint: None,
        tensors: w.manifest.clone(),
    };
    encode(&meta, &w.payload())
}

pub fn encode_adapter(adapter: &AdapterState) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    for (name, t) in adapter.named_tensors() {
        w.tensor(name, t);
    }
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        kind: Kind::Adapter,
        model_config: None,
        adapter_spec: Some(adapter.spec.clone()),
        base_fingerprint: Some(fingerprint_hex(adapter.base_fingerprint)),
        tensors: w.manifest.clone(),
    };
    encode(&meta, &w.payload())
}

/// Parsed header and the raw payload.
pub struct RawFile<'a> {
    pub meta: Metadata,
    pub payload: &'a [u8],
}

pub fn read_header(bytes: &[u8]) -> Result<RawFile<'_>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an HFX1 file (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| Error::Format("truncated metadata".into()))?;
    let meta: Metadata =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("bad metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", meta.format_version)));
    }
    let payload = &bytes[8 + len..];
    let want: usize = meta.tensors.iter().map(ManifestEntry::byte_len).sum();
    if payload.len() != want {
        return Err(Error::Format(format!("payload is {} bytes, manifest implies {want}", payload.len())));
    }
    Ok(RawFile { meta, payload })
}

enum Decoded {
    F64(Vec<f64>),
    Codes(Vec<i8>),
}

fn decode_tensors(raw: &RawFile<'_>) -> Result<HashMap<String, (ManifestEntry, Decoded)>> {
    let mut out = HashMap::new();
    let mut off = 0;
    for e in &raw.meta.tensors {
        let bytes = &raw.payload[off..off + e.byte_len()];
        off += e.byte_len();
        let n = e.count();
        let d = match e.dtype {
            Dtype::F64 => Decoded::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::I8 => Decoded::Codes(bytes.iter().map(|&b| b as i8).collect()),
            Dtype::I4 => {
                let sign = |nib: u8| ((nib << 4) as i8) >> 4;
                let mut codes: Vec<i8> = bytes.iter().flat_map(|&b| [sign(b & 0x0f), sign(b >> 4)]).collect();
                codes.truncate(n);
                Decoded::Codes(codes)
            }
        };
        if out.insert(e.name.clone(), (e.clone(), d)).is_some() {
            return Err(Error::Format(format!("duplicate tensor {:?}", e.name)));
        }
    }
    Ok(out)
}

struct Tensors(HashMap<String, (ManifestEntry, Decoded)>);

impl Tensors {
    fn take_f64(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        match self.0.remove(name) {
            Some((e, Decoded::F64(v))) if e.shape == shape => Tensor::new(shape, v),
            Some((e, _)) => Err(Error::Format(format!("tensor {name:?}: shape {:?} / dtype {:?}, expected f64 {shape:?}", e.shape, e.dtype))),
            None => Err(Error::Format(format!("missing tensor {name:?}"))),
        }
    }

    fn take_linear(&mut self, name: &str, rows: usize, cols: usize) -> Result<Linear> {
        if self.0.contains_key(name) {
            return Ok(Linear::Dense(self.take_f64(name, &[rows, cols])?));
        }
        let codes_name = format!("{name}.codes");
        let (e, codes) = match self.0.remove(&codes_name) {
            Some((e, Decoded::Codes(c))) if e.shape == [rows, cols] => (e, c),
            Some(_) => return Err(Error::Format(format!("tensor {codes_name:?} has the wrong shape or dtype"))),
            None => return Err(Error::Format(format!("missing tensor {name:?}"))),
        };
        let scales = self.take_f64(&format!("{name}.scales"), &[rows])?.into_data();
        let bits = if e.dtype == Dtype::I4 { 4 } else { 8 };
        Ok(Linear::Quantized(QuantMatrix { rows, cols, bits, codes, scales }))
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(extra) => Err(Error::Format(format!("unexpected tensor {extra:?}"))),
            None => Ok(()),
        }
    }
}

/// Decodes a base checkpoint; returns the model and its fingerprint.
pub fn decode_base(bytes: &[u8]) -> Result<(TransformerLM, u64)> {
    let raw = read_header(bytes)?;
    if raw.meta.kind != Kind::Base {
        return Err(Error::Format("expected a base checkpoint, found an adapter".into()));
    }
    let config = raw.meta.model_config.clone().ok_or_else(|| Error::Format("base checkpoint without model_config".into()))?;
    config.validate()?;
    let fp = fnv1a64(raw.payload);
    let mut t = Tensors(decode_tensors(&raw)?);
    let mut model = TransformerLM::new(config.clone())?;
    let (d, v, c, f) = (config.embed_dim, config.vocab_size, config.context_len, config.ff_dim());
    model.tok_emb = t.take_f64("tok_emb", &[v, d])?;
    model.pos_emb = t.take_f64("pos_emb", &[c, d])?;
    for (i, b) in model.blocks.iter_mut().enumerate() {
        let p = format!("blocks.{i}");
        b.ln1_gain = t.take_f64(&format!("{p}.ln1_gain"), &[d])?;
        b.ln1_bias = t.take_f64(&format!("{p}.ln1_bias"), &[d])?;
        b.wq = t.take_linear(&format!("{p}.wq"), d, d)?;
        b.wk = t.take_linear(&format!("{p}.wk"), d, d)?;
        b.wv = t.take_linear(&format!("{p}.wv"), d, d)?;
        b.wo = t.take_linear(&format!("{p}.wo"), d, d)?;
        b.ln2_gain = t.take_f64(&format!("{p}.ln2_gain"), &[d])?;
        b.ln2_bias = t.take_f64(&format!("{p}.ln2_bias"), &[d])?;
        b.ff1 = t.take_linear(&format!("{p}.ff1"), d, f)?;
        b.ff2 = t.take_linear(&format!("{p}.ff2"), f, d)?;
    }
    model.lnf_gain = t.take_f64("lnf_gain", &[d])?;
    model.lnf_bias = t.take_f64("lnf_bias", &[d])?;
    model.head = t.take_linear("head", d, v)?;
    t.finish()?;
    model.set_trainable(false);
    Ok((model, fp))
}

/// Decodes an adapter file. Tensor shapes are checked against the layout
/// its adapter spec implies for `config`.
pub fn decode_adapter(bytes: &[u8], config: &ModelConfig) -> Result<AdapterState> {
    let raw = read_header(bytes)?;
    if raw.meta.kind != Kind::Adapter {
        return Err(Error::Format("expected an adapter file, found a base checkpoint".into()));
    }
    let spec = raw.meta.adapter_spec.clone().ok_or_else(|| Error::Format("adapter file without adapter_spec".into()))?;
    let fp = raw.meta.base_fingerprint.as_deref().ok_or_else(|| Error::Format("adapter file without base_fingerprint".into()))?;
    let fp = parse_fingerprint(fp)?;
    let mut t = Tensors(decode_tensors(&raw)?);
    let mut state = hotfix_core::peft::init_adapter(&spec, config, 0)?.with_fingerprint(fp);
    for (name, slot) in state.named_tensors_mut() {
        let shape = slot.shape().to_vec();
        let loaded = t.take_f64(&name, &shape)?;
        *slot = loaded.trainable();
    }
    t.finish()?;
    Ok(state)
}

pub fn save_base(path: &Path, model: &TransformerLM) -> Result<u64> {
    let bytes = encode_base(model)?;
    fs::write(path, &bytes)?;
    Ok(fnv1a64(read_header(&bytes)?.payload))
}

pub fn load_base(path: &Path) -> Result<(TransformerLM, u64)> {
    decode_base(&read_file(path)?)
}

pub fn save_adapter(path: &Path, adapter: &AdapterState) -> Result<()> {
    fs::write(path, encode_adapter(adapter)?)?;
    Ok(())
}

/// Loads an adapter and checks that it was trained against the base with
/// fingerprint `base_fp`.
pub fn load_adapter(path: &Path, config: &ModelConfig, base_fp: u64) -> Result<AdapterState> {
    let a = decode_adapter(&read_file(path)?, config)?;
    a.check_base(base_fp)?;
    Ok(a)
}

/// True when `kind` adapters run on a quantized copy of the base.
pub fn needs_quantized_base(kind: AdapterKind) -> bool {
    kind == AdapterKind::Qlora
}

/// Bitwise equality of every tensor payload.
pub fn same_adapter_payload(a: &AdapterState, b: &AdapterState) -> bool {
    let (x, y) = (a.named_tensors(), b.named_tensors());
    x.len() == y.len()
        && x.iter().zip(&y).all(|((n1, t1), (n2, t2))| {
            n1 == n2 && t1.shape() == t2.shape() && t1.data().iter().zip(t2.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
        && matches!((&a.params, &b.params), (AdapterParams::Lora(_), AdapterParams::Lora(_)) | (AdapterParams::Ia3(_), AdapterParams::Ia3(_)) | (AdapterParams::Prefix(_), AdapterParams::Prefix(_)))
}
