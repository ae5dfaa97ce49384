//! Run configuration: one JSON file, every field optional, with
//! `section.field=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use hotfix_core::hotfix::HotfixConfig;
use hotfix_core::infer::SamplerConfig;
use hotfix_core::loss::Objective;
use hotfix_core::model::ModelConfig;
use hotfix_core::peft::{AdapterKind, AdapterSpec};
use hotfix_core::error::read_text;
use hotfix_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without a lower validation Dual loss before stopping; `null`
    /// disables early stopping.
    pub patience: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection { epochs: 20, batch_size: 8, learning_rate: 3e-4, seed: 0, patience: Some(3) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BaseTrainingSection {
    fn default() -> Self {
        BaseTrainingSection { epochs: 8, batch_size: 8, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Tokenizer unit that ends a sampled completion.
    pub stop: String,
    pub ks: Vec<usize>,
    /// Split whose pairs are scored: "train", "validation" or "test".
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { stop: ";".into(), ks: vec![1, 5, 10], split: "test".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub seed: u64,
    pub pairs: usize,
    pub neutral: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { seed: 0, pairs: 250, neutral: 400 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: PathBuf,
    pub base: PathBuf,
    pub adapter: PathBuf,
    pub report: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            corpus: "run/corpus".into(),
            base: "run/base.hfx".into(),
            adapter: "run/adapter.hfx".into(),
            report: "run/report".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapter: AdapterSpec,
    pub objective: Objective,
    pub training: TrainingSection,
    pub base_training: BaseTrainingSection,
    /// `stop_token` is filled in from `eval.stop` at run time.
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
    pub corpus: CorpusSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::reference(),
            adapter: AdapterSpec::new(AdapterKind::Lora),
            objective: Objective::DualKl,
            training: TrainingSection::default(),
            base_training: BaseTrainingSection::default(),
            sampler: SamplerConfig::default(),
            eval: EvalSection::default(),
            corpus: CorpusSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = read_text(p)?;
            let file = serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if !file.is_object() {
                return Err(Error::Config(format!("{}: expected a JSON object", p.display())));
            }
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(as_config("model"))?;
        self.adapter.validate(&self.model).map_err(as_config("adapter"))?;
        self.hotfix_config().validate()?;
        if self.base_training.batch_size == 0 {
            return Err(Error::Config("base_training.batch_size must be >= 1".into()));
        }
        if !(self.base_training.learning_rate > 0.0 && self.base_training.learning_rate.is_finite()) {
            return Err(Error::Config("base_training.learning_rate must be positive".into()));
        }
        self.sampler.validate().map_err(as_config("sampler"))?;
        if self.eval.ks.is_empty() || self.eval.ks.iter().any(|&k| k == 0 || k > self.sampler.num_samples) {
            return Err(Error::Config(format!(
                "eval.ks must be non-empty with 1 <= k <= sampler.num_samples ({})",
                self.sampler.num_samples
            )));
        }
        if !matches!(self.eval.split.as_str(), "train" | "validation" | "test") {
            return Err(Error::Config(format!("eval.split must be train, validation or test, got {:?}", self.eval.split)));
        }
        if self.corpus.pairs == 0 {
            return Err(Error::Config("corpus.pairs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hotfix_config(&self) -> HotfixConfig {
        HotfixConfig {
            objective: self.objective,
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            seed: self.training.seed,
            patience: self.training.patience,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes the resolved config as `<stem>.config.json` next to `output`.
    pub fn write_beside(&self, output: &Path) -> Result<PathBuf> {
        let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        let path = output.with_file_name(format!("{stem}.config.json"));
        fs::write(&path, self.to_json())?;
        Ok(path)
    }
}

fn as_config(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(format!("{section}: {other}")),
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise.
/// Recursively overlays `top` onto `base`; non-object values replace.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a section")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("override {key:?}: parent is not a section")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.hotfix_config(), HotfixConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &ov(&["training.learning_rate=0.01", "objective=guided", "adapter.kind=ia3", "training.patience=null", "eval.ks=[1,2]"]),
        )
        .unwrap();
        assert_eq!(cfg.training.learning_rate, 0.01);
        assert_eq!(cfg.objective, Objective::Guided);
        assert_eq!(cfg.adapter.kind, AdapterKind::Ia3);
        assert_eq!(cfg.training.patience, None);
        assert_eq!(cfg.eval.ks, vec![1, 2]);
    }

    #[test]
    fn bad_values_name_the_field() {
        let cases = [
            ("training.learning_rate=0", "learning_rate"),
            ("objective=sharpen", "sharpen"),
            ("training.lr=1", "lr"),
            ("eval.ks=[11]", "eval.ks"),
            ("model.n_heads=3", "model"),
            ("eval.split=dev", "eval.split"),
        ];
        for (o, needle) in cases {
            match RunConfig::load(None, &ov(&[o])) {
                Err(Error::Config(m)) => assert!(m.contains(needle), "{o}: {m}"),
                other => panic!("{o}: {other:?}"),
            }
        }
        assert!(matches!(RunConfig::load(None, &ov(&["nokey"])), Err(Error::Config(_))));
    }

    #[test]
    fn file_and_overrides_combine() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"training": {"epochs": 3}, "corpus": {"pairs": 40}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &ov(&["corpus.pairs=50"])).unwrap();
        assert_eq!((cfg.training.epochs, cfg.training.batch_size, cfg.corpus.pairs), (3, 8, 50));
        let written = cfg.write_beside(&dir.path().join("base.hfx")).unwrap();
        assert_eq!(written.file_name().unwrap(), "base.config.json");
        assert_eq!(RunConfig::load(Some(&written), &[]).unwrap(), cfg);
    }
}
