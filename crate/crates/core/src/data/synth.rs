//! Template-generated pseudo-Java bug/fix corpus.
//!
//! Every pair belongs to one bug family: a setup statement pattern in the
//! context is followed by the family's target statement, whose buggy and
//! fixed versions differ by one or two tokens. Neutral sequences never
//! contain a buggy statement; some of them use a family's correct form after
//! its setup, the rest exercise unrelated idioms. Every neutral sequence ends
//! with a statement that is predictable from the lines before it.

use std::collections::HashSet;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::example::CodePair;

const VARS: [&str; 40] = [
    "count", "total", "index", "limit", "offset", "start", "end", "len", "value", "result", "width", "height",
    "depth", "step", "first", "last", "left", "right", "low", "high", "sum", "delta", "score", "level", "size",
    "cursor", "margin", "weight", "amount", "port", "row", "col", "slot", "rank", "tick", "hits", "misses", "base",
    "scale", "quota",
];

const OBJS: [&str; 24] = [
    "list", "map", "buffer", "builder", "queue", "stack", "cache", "config", "reader", "writer", "parser", "client",
    "server", "session", "channel", "socket", "table", "window", "panel", "logger", "engine", "store", "pool",
    "registry",
];

const WORDS: [&str; 8] = ["\"start\"", "\"done\"", "\"retry\"", "\"skip\"", "\"ok\"", "\"fail\"", "\"init\"", "\"next\""];

/// Number of bug families.
pub const N_FAMILIES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Probability that a neutral sequence includes one family setup followed
    /// by that family's correct statement.
    pub correct_idiom_rate: f64,
    /// Probability that a pair carries a trailing suffix statement.
    pub suffix_rate: f64,
    /// Maximum number of filler statements before a pair's setup.
    pub max_fillers: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { correct_idiom_rate: 0.35, suffix_rate: 0.5, max_fillers: 2 }
    }
}

struct Names<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl Names<'_> {
    fn vars<const N: usize>(&mut self) -> [&'static str; N] {
        let idx = index::sample(self.rng, VARS.len(), N);
        std::array::from_fn(|i| VARS[idx.index(i)])
    }

    fn obj(&mut self) -> &'static str {
        OBJS.choose(self.rng).unwrap()
    }
}

/// `(setup, buggy, fixed)` for family `f`. Only the object in the setup
/// varies; the target statement is the same for every pair of a family.
fn family(f: usize, n: &mut Names<'_>) -> (String, String, String) {
    let o = n.obj();
    let (setup, buggy, fixed) = match f {
        0 => ("int i = 0 ; int n = {o} . size ( ) ;", "boolean inRange = i <= n ;", "boolean inRange = i < n ;"),
        1 => (
            "String first = lines [ 0 ] ; String rest = {o} . trim ( ) ;",
            "int pos = rest . indexOf ( ':' ) ;",
            "int pos = first . indexOf ( ':' ) ;",
        ),
        2 => ("int len = {o} . length ;", "int mid = len / 3 ;", "int mid = len / 2 ;"),
        3 => ("{o} . open ( ) ;", "this . setEnabled ( false ) ;", "this . setEnabled ( true ) ;"),
        4 => (
            "int a = {o} . get ( 0 ) ; int b = {o} . get ( 1 ) ;",
            "int diff = subtract ( b , a ) ;",
            "int diff = subtract ( a , b ) ;",
        ),
        5 => (
            "String key = {o} . name ( ) ; Map index = new HashMap ( ) ;",
            "index . add ( key , 1 ) ;",
            "index . put ( key , 1 ) ;",
        ),
        6 => ("Stream s = {o} . stream ( ) ;", "if ( s == null ) s . close ( ) ;", "if ( s != null ) s . close ( ) ;"),
        _ => ("int count = 0 ; {o} . add ( item ) ;", "count = count - 1 ;", "count = count + 1 ;"),
    };
    (setup.replace("{o}", o), buggy.to_string(), fixed.to_string())
}

/// `(setup, final statement)` of an idiom unrelated to any bug family.
fn neutral_idiom(n: &mut Names<'_>) -> (String, String) {
    match n.rng.random_range(0..5) {
        0 => {
            let [v, w] = n.vars();
            (format!("int {v} = {w} * 2 ;"), format!("return {v} ;"))
        }
        1 => {
            let [s] = n.vars();
            let o = n.obj();
            (format!("String {s} = {o} . toString ( ) ;"), format!("log ( {s} ) ;"))
        }
        2 => {
            let o = n.obj();
            (format!("{o} . flush ( ) ;"), format!("{o} . close ( ) ;"))
        }
        3 => {
            let l = n.obj();
            (format!("List {l} = new ArrayList ( ) ;"), format!("{l} . clear ( ) ;"))
        }
        _ => {
            let [r, x] = n.vars();
            (format!("double {r} = {x} / 4.0 ;"), format!("print ( {r} ) ;"))
        }
    }
}

fn filler(n: &mut Names<'_>) -> String {
    match n.rng.random_range(0..4) {
        0 => {
            let o = n.obj();
            format!("{o} . reset ( ) ;")
        }
        1 => {
            let [v] = n.vars();
            let k = n.rng.random_range(0..10);
            format!("int {v} = {k} ;")
        }
        2 => {
            let [v, w] = n.vars();
            format!("{v} = {w} ;")
        }
        _ => {
            let w = WORDS.choose(n.rng).unwrap();
            format!("log ( {w} ) ;")
        }
    }
}

/// Family of the `i`-th generated pair.
pub fn family_of(i: usize) -> usize {
    i % N_FAMILIES
}

/// `n_pairs` pairs with distinct contexts and `n_neutral` bug-free sequences,
/// fully determined by `seed`.
pub fn synth_corpus(seed: u64, n_pairs: usize, n_neutral: usize) -> (Vec<CodePair>, Vec<String>) {
    synth_corpus_with(&SynthConfig::default(), seed, n_pairs, n_neutral)
}

pub fn synth_corpus_with(cfg: &SynthConfig, seed: u64, n_pairs: usize, n_neutral: usize) -> (Vec<CodePair>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Names { rng: &mut rng };
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut seen = HashSet::new();
    while pairs.len() < n_pairs {
        let f = family_of(pairs.len());
        let fillers = names.rng.random_range(0..=cfg.max_fillers);
        let mut ctx: Vec<String> = (0..fillers).map(|_| filler(&mut names)).collect();
        let (setup, buggy, fixed) = family(f, &mut names);
        ctx.push(setup);
        let context = ctx.join(" ");
        let suffix = if names.rng.random_bool(cfg.suffix_rate) { Some(filler(&mut names)) } else { None };
        if !seen.insert(context.clone()) {
            continue;
        }
        pairs.push(CodePair {
            pair_id: format!("syn-{:04}-f{f}", pairs.len()),
            context,
            buggy_stmt: buggy,
            fixed_stmt: fixed,
            suffix,
        });
    }
    let mut neutral = Vec::with_capacity(n_neutral);
    for _ in 0..n_neutral {
        let mut stmts = Vec::new();
        if names.rng.random_bool(0.5) {
            stmts.push(filler(&mut names));
        }
        if names.rng.random_bool(cfg.correct_idiom_rate) {
            let f = names.rng.random_range(0..N_FAMILIES);
            let (setup, _, fixed) = family(f, &mut names);
            stmts.push(setup);
            stmts.push(fixed);
        } else if names.rng.random_bool(0.5) {
            stmts.push(filler(&mut names));
        }
        let (setup, last) = neutral_idiom(&mut names);
        stmts.push(setup);
        stmts.push(last);
        neutral.push(stmts.join(" "));
    }
    (pairs, neutral)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::example::build_example;
    use crate::data::tokenizer::Tokenizer;

    #[test]
    fn reproducible_under_seed() {
        assert_eq!(synth_corpus(7, 50, 30), synth_corpus(7, 50, 30));
        assert_ne!(synth_corpus(7, 50, 30), synth_corpus(8, 50, 30));
    }

    #[test]
    fn every_pair_builds_with_small_diff() {
        let (pairs, neutral) = synth_corpus(3, 400, 200);
        let texts: Vec<String> = pairs
            .iter()
            .flat_map(|p| [p.full_text(&p.buggy_stmt), p.full_text(&p.fixed_stmt)])
            .chain(neutral.iter().cloned())
            .collect();
        let tok = Tokenizer::fit(texts.iter().map(String::as_str), 512).unwrap();
        assert!(tok.len() < 512);
        let contexts: HashSet<&String> = pairs.iter().map(|p| &p.context).collect();
        assert_eq!(contexts.len(), pairs.len());
        for p in &pairs {
            let ex = build_example(p, &tok).unwrap();
            let changed = ex.w_plus.iter().sum::<f64>();
            assert!((1.0..=2.0).contains(&changed), "{}: {changed}", p.pair_id);
            assert!(ex.fixed_tokens.len() <= 64);
        }
    }

    #[test]
    fn neutral_text_contains_no_buggy_statement() {
        let (_, neutral) = synth_corpus(5, 200, 300);
        let mut with_idiom = 0;
        for n in &neutral {
            for bad in ["<=", "/ 3 ", "false", "==", "- 1 ;", ". add ( item ) ; map"] {
                assert!(!n.contains(bad), "{n}");
            }
            assert!(n.ends_with(';'));
            with_idiom += usize::from(["inRange", "indexOf", "mid", "setEnabled", "diff", "put", "!=", "+ 1"]
                .iter()
                .any(|k| n.contains(k)));
        }
        assert!((60..150).contains(&with_idiom), "{with_idiom}");
    }
}
