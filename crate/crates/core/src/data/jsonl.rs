//! JSONL pair files: one object per line with `context`, `buggy`, `fixed`,
//! and optional `suffix` and `id`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::data::example::CodePair;
use crate::error::{read_text, Error, Result};

pub fn parse_jsonl(text: &str) -> Result<Vec<CodePair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| Error::Parse { line: Some(n), message: e.to_string() })?;
        let field = |k: &str| -> Result<String> {
            match v.get(k) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(Error::Parse { line: Some(n), message: format!("field \"{k}\" must be a string") }),
                None => Err(Error::Parse { line: Some(n), message: format!("missing field \"{k}\"") }),
            }
        };
        let optional = |k: &str| -> Result<Option<String>> {
            match v.get(k) {
                None | Some(Value::Null) => Ok(None),
                Some(_) => field(k).map(Some),
            }
        };
        out.push(CodePair {
            context: field("context")?,
            buggy_stmt: field("buggy")?,
            fixed_stmt: field("fixed")?,
            suffix: optional("suffix")?,
            pair_id: optional("id")?.unwrap_or_else(|| format!("line-{n}")),
        });
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<CodePair>> {
    parse_jsonl(&read_text(path)?)
}

pub fn write_jsonl(path: &Path, pairs: &[CodePair]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for p in pairs {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
