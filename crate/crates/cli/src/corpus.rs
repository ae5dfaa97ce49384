//! On-disk corpus directory: `pairs.jsonl`, `neutral.txt` (one sequence per
//! line), `split.json` and `tokenizer.json`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use hotfix_core::data::jsonl::{load_jsonl, write_jsonl};
use hotfix_core::data::split::{split_8_1_1, Split};
use hotfix_core::data::synth::synth_corpus;
use hotfix_core::data::{CodePair, Tokenizer};
use hotfix_core::error::read_text;
use hotfix_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const NEUTRAL_FILE: &str = "neutral.txt";
pub const SPLIT_FILE: &str = "split.json";
pub const TOKENIZER_FILE: &str = "tokenizer.json";

/// Upper bound on the fitted vocabulary.
pub const MAX_VOCAB: usize = 512;

/// Pair ids per split, plus how many leading neutral lines are training text.
/// The remaining neutral lines are held out for perplexity and pass@k.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub neutral_train: usize,
    pub neutral_heldout: usize,
}

pub struct Corpus {
    pub pairs: Vec<CodePair>,
    pub neutral: Vec<String>,
    pub split: CorpusSplit,
    pub tok: Tokenizer,
}

/// Synthesizes a corpus and writes it to `out`.
pub fn generate(seed: u64, n_pairs: usize, n_neutral: usize, out: &Path) -> Result<()> {
    if n_pairs == 0 {
        return Err(Error::Config("--pairs must be >= 1".into()));
    }
    let (pairs, neutral) = synth_corpus(seed, n_pairs, n_neutral);
    let ids: Vec<String> = pairs.iter().map(|p| p.pair_id.clone()).collect();
    let Split { train, validation, test } = split_8_1_1(&ids, seed);
    let neutral_heldout = n_neutral / 10;
    let split = CorpusSplit { train, validation, test, neutral_train: n_neutral - neutral_heldout, neutral_heldout };
    let mut texts: Vec<String> = pairs.iter().flat_map(|p| [p.full_text(&p.buggy_stmt), p.full_text(&p.fixed_stmt)]).collect();
    texts.extend(neutral.iter().cloned());
    let tok = Tokenizer::fit(texts.iter().map(String::as_str), MAX_VOCAB)?;

    fs::create_dir_all(out)?;
    write_jsonl(&out.join(PAIRS_FILE), &pairs)?;
    let mut neutral_text = neutral.join("\n");
    neutral_text.push('\n');
    fs::write(out.join(NEUTRAL_FILE), neutral_text)?;
    fs::write(out.join(SPLIT_FILE), serde_json::to_string_pretty(&split)? + "\n")?;
    fs::write(out.join(TOKENIZER_FILE), tok.to_json())?;
    Ok(())
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let pairs = load_jsonl(&dir.join(PAIRS_FILE))?;
        let neutral: Vec<String> = read_text(&dir.join(NEUTRAL_FILE))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect();
        let split: CorpusSplit = serde_json::from_str(&read_text(&dir.join(SPLIT_FILE))?)?;
        let tok = Tokenizer::from_json(&read_text(&dir.join(TOKENIZER_FILE))?)?;
        if split.neutral_train + split.neutral_heldout != neutral.len() {
            return Err(Error::Input(format!(
                "split.json declares {} neutral lines, {} has {}",
                split.neutral_train + split.neutral_heldout,
                NEUTRAL_FILE,
                neutral.len()
            )));
        }
        let corpus = Corpus { pairs, neutral, split, tok };
        corpus.pairs_in("train")?;
        corpus.pairs_in("validation")?;
        corpus.pairs_in("test")?;
        Ok(corpus)
    }

    /// Pairs of the named split, in split order.
    pub fn pairs_in(&self, split: &str) -> Result<Vec<CodePair>> {
        let ids = match split {
            "train" => &self.split.train,
            "validation" => &self.split.validation,
            "test" => &self.split.test,
            other => return Err(Error::Config(format!("unknown split {other:?}"))),
        };
        let by_id: HashMap<&str, &CodePair> = self.pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|p| (*p).clone())
                    .ok_or_else(|| Error::Input(format!("split {split} names unknown pair {id:?}")))
            })
            .collect()
    }

    pub fn neutral_train(&self) -> &[String] {
        &self.neutral[..self.split.neutral_train]
    }

    pub fn neutral_heldout(&self) -> &[String] {
        &self.neutral[self.split.neutral_train..]
    }

    pub fn encode_all(&self, texts: &[String]) -> Vec<Vec<usize>> {
        texts.iter().map(|t| self.tok.encode(t)).collect()
    }
}
