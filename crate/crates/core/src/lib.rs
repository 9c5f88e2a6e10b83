//! poisonforge — a desk-scale laboratory for studying clean-label data
//! poisoning of small image classifiers.
//!
//! The crate bundles everything the experiments need under one roof:
//! a minimal reverse-mode autodiff tensor engine (`tensor`), the four
//! model roles (`models`), dataset ingestion and poison injection
//! (`data`), poison crafting — a generative feature-transfer attack plus
//! patch / blend / feature-collision baselines (`attacks`), anomaly
//! detection defenses (`defenses`), metrics and studies (`eval`), and a
//! seeded experiment runner (`runner`) behind the `poisonforge` binary.
//!
//! Everything is deterministic: one root seed fans out into named
//! substreams, and re-running any stage with the same config reproduces
//! its artifacts byte for byte.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod defenses;
pub mod eval;
pub mod models;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod runner;
pub mod training;
pub mod tensor;

pub use tensor::{Tape, Tensor, TensorError, TensorId};
