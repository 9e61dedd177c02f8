//! Few-shot prompting protocol for Alzheimer's detection from Cookie Theft
//! picture descriptions.
//!
//! The pipeline: [`chat`] turns CHAT transcripts into normalized participant
//! text, [`mmse`] maps MMSE scores to proxy probabilities, [`pool`] holds
//! exemplar pools and selects class-balanced demonstrations, [`prompt`]
//! renders them into a chat prompt, [`llm`] talks to a backend through a
//! record/replay cache, [`verdict`] parses the forced-decision answer,
//! [`metrics`] scores runs, and [`harness`] drives the k-sweep.
//! [`pool_builder`] generates the reasoning-augmented pool once.

pub mod chat;
pub mod exec;
pub mod harness;
pub mod llm;
pub mod manifest;
pub mod metrics;
pub mod mmse;
pub mod pool;
pub mod pool_builder;
pub mod prompt;
pub mod rng;
pub mod tfidf;
pub mod verdict;

pub use chat::Transcript;
pub use exec::Execution;
pub use manifest::{Manifest, ManifestEntry, Split};
pub use mmse::{ClassLabel, MmseScore};
pub use pool::{Exemplar, ExemplarPool, PoolKind};
pub use prompt::Mode;
pub use verdict::{parse_verdict, ParseFailure, Verdict};
