//! Test-only crate. The acceptance suite lives in `tests/acceptance.rs`; it
//! is a separate package so that it runs after every other test target of
//! the workspace.
