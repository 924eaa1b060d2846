//! Holds the workspace-level acceptance suite; see `tests/acceptance.rs`.
