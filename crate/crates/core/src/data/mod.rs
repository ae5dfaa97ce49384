//! Code pairs, tokenization, diff weights, splits and the synthetic corpus.

pub mod diff;
pub mod example;
pub mod jsonl;
pub mod split;
pub mod synth;
pub mod tokenizer;

pub use example::{build_example, CodePair, HotfixExample};
pub use tokenizer::Tokenizer;
