use serde::{Deserialize, Serialize};

use crate::data::diff::diff_masks;
use crate::data::tokenizer::{normalize, Tokenizer};
use crate::error::{Error, Result};

/// One single-statement bug fix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodePair {
    #[serde(rename = "id")]
    pub pair_id: String,
    pub context: String,
    #[serde(rename = "buggy")]
    pub buggy_stmt: String,
    #[serde(rename = "fixed")]
    pub fixed_stmt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suffix: Option<String>,
}

impl CodePair {
    pub fn validate(&self) -> Result<()> {
        if self.context.trim().is_empty() {
            return Err(Error::Input(format!("pair {}: empty context", self.pair_id)));
        }
        if normalize(&self.buggy_stmt) == normalize(&self.fixed_stmt) {
            return Err(Error::DegeneratePair(format!("pair {}: statements are identical", self.pair_id)));
        }
        Ok(())
    }

    /// Normalized text of the context followed by `stmt` and the suffix.
    pub fn full_text(&self, stmt: &str) -> String {
        let mut parts = vec![normalize(&self.context), normalize(stmt)];
        if let Some(s) = &self.suffix {
            let s = normalize(s);
            if !s.is_empty() {
                parts.push(s);
            }
        }
        parts.join(" ")
    }
}

/// Token sequences and diff weights for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct HotfixExample {
    pub pair_id: String,
    pub fixed_tokens: Vec<usize>,
    pub buggy_tokens: Vec<usize>,
    pub w_plus: Vec<f64>,
    pub w_minus: Vec<f64>,
    pub context_len: usize,
}

pub fn build_example(pair: &CodePair, tok: &Tokenizer) -> Result<HotfixExample> {
    pair.validate()?;
    let context = tok.encode(&pair.context);
    let buggy = tok.encode(&pair.buggy_stmt);
    let fixed = tok.encode(&pair.fixed_stmt);
    if buggy == fixed {
        return Err(Error::DegeneratePair(format!("pair {}: statements tokenize identically", pair.pair_id)));
    }
    let suffix = pair.suffix.as_deref().map(|s| tok.encode(s)).unwrap_or_default();
    let join = |stmt: &[usize]| [context.as_slice(), stmt, suffix.as_slice()].concat();
    let (buggy_tokens, fixed_tokens) = (join(&buggy), join(&fixed));
    let (w_minus, w_plus) = diff_masks(&buggy_tokens, &fixed_tokens)
        .map_err(|e| match e {
            Error::DegeneratePair(m) => Error::DegeneratePair(format!("pair {}: {m}", pair.pair_id)),
            other => other,
        })?;
    Ok(HotfixExample {
        pair_id: pair.pair_id.clone(),
        fixed_tokens,
        buggy_tokens,
        w_plus,
        w_minus,
        context_len: context.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listing_pair() -> CodePair {
        CodePair {
            pair_id: "listing".into(),
            context: "String firstLine = lines [ 0 ] ; String stacktrace = trace ( ) ; int pos =".into(),
            buggy_stmt: "stacktrace.indexOf(':');".into(),
            fixed_stmt: "firstLine.indexOf(':');".into(),
            suffix: None,
        }
    }

    #[test]
    fn listing_masks_mark_only_the_identifier() {
        let p = listing_pair();
        let tok = Tokenizer::fit([p.context.as_str(), &p.buggy_stmt, &p.fixed_stmt], 100).unwrap();
        let ex = build_example(&p, &tok).unwrap();
        let plus: Vec<String> =
            ex.fixed_tokens.iter().zip(&ex.w_plus).filter(|(_, &w)| w == 1.0).map(|(&t, _)| tok.decode(&[t])).collect();
        let minus: Vec<String> =
            ex.buggy_tokens.iter().zip(&ex.w_minus).filter(|(_, &w)| w == 1.0).map(|(&t, _)| tok.decode(&[t])).collect();
        assert_eq!(plus, vec!["firstLine"]);
        assert_eq!(minus, vec!["stacktrace"]);
        assert!(ex.w_plus[..ex.context_len].iter().all(|&w| w == 0.0));
        assert_eq!(ex.fixed_tokens[..ex.context_len], ex.buggy_tokens[..ex.context_len]);
        // No suffix: both sequences end with the statement.
        assert_eq!(tok.decode(&ex.fixed_tokens[ex.fixed_tokens.len() - 2..]), ") ;");
        assert_eq!(tok.decode(&ex.fixed_tokens), p.full_text(&p.fixed_stmt));
    }

    #[test]
    fn identical_statements_rejected() {
        let mut p = listing_pair();
        p.fixed_stmt = "stacktrace . indexOf ( ':' ) ;".into();
        let tok = Tokenizer::fit([p.context.as_str(), &p.buggy_stmt], 100).unwrap();
        assert!(matches!(build_example(&p, &tok), Err(Error::DegeneratePair(_))));
        // Distinct text that collapses to the same ids through <unk>.
        let mut p = listing_pair();
        p.fixed_stmt = "zzz.indexOf(':');".into();
        p.buggy_stmt = "yyy.indexOf(':');".into();
        let tok = Tokenizer::fit([p.context.as_str()], 100).unwrap();
        assert!(matches!(build_example(&p, &tok), Err(Error::DegeneratePair(_))));
    }
}
