//! Corpus generation, base training, hotfixing, evaluation and sweeps on top
//! of `hotfix-core`, plus the HFX1 file format.

pub mod app;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;

use hotfix_core::Error;

/// Process exit code for a failed command: 1 for usage and configuration
/// errors, 2 for everything data- or compatibility-related.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Spec(_)) => 1,
        _ => 2,
    }
}
