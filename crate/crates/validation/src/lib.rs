//! Host crate for the end-to-end acceptance suite in `tests/acceptance.rs`.
//! It depends on the shared fixtures of the core integration tests.
