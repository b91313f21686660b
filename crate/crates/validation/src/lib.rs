//! Acceptance suite for the duet toolkit; the criteria live in `tests/acceptance.rs`.
