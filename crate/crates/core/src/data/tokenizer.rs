//! Word/symbol-level code tokenizer with whitespace normalization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;

const OPS3: [&str; 4] = [">>>", "<<=", ">>=", "..."];
const OPS2: [&str; 18] = [
    "==", "!=", "<=", ">=", "&&", "||", "++", "--", "+=", "-=", "*=", "/=", "%=", "->", "::", "<<", ">>", "=>",
];

/// Splits `text` into units: identifiers, numbers, string and character
/// literals, multi-character operators, and single punctuation characters.
/// Whitespace only separates units.
pub fn split(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_alphabetic() || c == '_' || c == '$' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                i += 1;
            }
        } else if c.is_ascii_digit() {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
            }
        } else if c == '"' || c == '\'' {
            i += 1;
            while i < chars.len() && chars[i] != c {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(chars.len());
        } else {
            let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
            i += if OPS3.iter().any(|op| rest.starts_with(op)) {
                3
            } else if OPS2.iter().any(|op| rest.starts_with(op)) {
                2
            } else {
                1
            };
        }
        out.push(chars[start..i].iter().collect());
    }
    out
}

/// Canonical single-space rendering of `text`'s units.
pub fn normalize(text: &str) -> String {
    split(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Builds a vocabulary from units in order of first appearance, keeping at
    /// most `max_size` entries including the unknown token.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < 1 {
            return Err(Error::Config("vocabulary size must be >= 1".into()));
        }
        let mut tok = Tokenizer { vocab: vec![UNK.to_string()], index: HashMap::new() };
        tok.index.insert(UNK.to_string(), UNK_ID);
        'outer: for text in texts {
            for unit in split(text) {
                if tok.vocab.len() >= max_size {
                    break 'outer;
                }
                if !tok.index.contains_key(&unit) {
                    tok.index.insert(unit.clone(), tok.vocab.len());
                    tok.vocab.push(unit);
                }
            }
        }
        Ok(tok)
    }

    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Parse { line: None, message: format!("vocabulary must start with {UNK}") });
        }
        let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        if index.len() != vocab.len() {
            return Err(Error::Parse { line: None, message: "duplicate vocabulary entry".into() });
        }
        Ok(Tokenizer { vocab, index })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split(text).iter().map(|u| self.id(u).unwrap_or(UNK_ID)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab.get(i).map(String::as_str).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.vocab).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Tokenizer::from_vocab(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_code_units() {
        assert_eq!(
            split("int pos=stacktrace.indexOf(':');"),
            vec!["int", "pos", "=", "stacktrace", ".", "indexOf", "(", "':'", ")", ";"]
        );
        assert_eq!(split("if (a <= b && c != 0.5) x += \"a b\";"), vec![
            "if", "(", "a", "<=", "b", "&&", "c", "!=", "0.5", ")", "x", "+=", "\"a b\"", ";"
        ]);
        assert_eq!(split("i++ >>> 2"), vec!["i", "++", ">>>", "2"]);
    }

    #[test]
    fn whitespace_is_insignificant() {
        assert_eq!(normalize("a  =\n b+1 ;"), normalize("a=b + 1;"));
    }

    #[test]
    fn fit_caps_and_maps_unknown() {
        let t = Tokenizer::fit(["a b c d e"], 3).unwrap();
        assert_eq!(t.vocab(), &["<unk>", "a", "b"]);
        assert_eq!(t.encode("a c"), vec![1, UNK_ID]);
    }

    #[test]
    fn json_round_trip() {
        let t = Tokenizer::fit(["x = y ;", "return x ;"], 100).unwrap();
        let back = Tokenizer::from_json(&t.to_json()).unwrap();
        assert_eq!(back.vocab(), t.vocab());
        assert_eq!(back.encode("return y ;"), t.encode("return y ;"));
    }

    fn unit() -> impl Strategy<Value = String> {
        prop_oneof![
            "[a-zA-Z_][a-zA-Z0-9_]{0,6}",
            "[0-9]{1,4}",
            Just("==".to_string()),
            Just("<=".to_string()),
            Just("(".to_string()),
            Just(";".to_string()),
            Just(".".to_string()),
            Just("'x'".to_string()),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_is_normalizing_identity(units in prop::collection::vec(unit(), 1..20), seps in prop::collection::vec("[ \t\n]{0,3}", 20)) {
            // Adjacent words need a separator; symbols may touch.
            let mut text = String::new();
            for (i, u) in units.iter().enumerate() {
                text.push_str(u);
                text.push_str(if seps[i].is_empty() { " " } else { &seps[i] });
            }
            let tok = Tokenizer::fit([text.as_str()], 1000).unwrap();
            prop_assert_eq!(tok.decode(&tok.encode(&text)), normalize(&text));
            prop_assert_eq!(normalize(&normalize(&text)), normalize(&text));
        }
    }
}
