//! Acceptance suite lives under `tests/acceptance`.
