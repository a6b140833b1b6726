//! Benchmark engine for code language models on decompiled Android malware.
//!
//! Pipeline stages: load a decompiled-function corpus, prompt a model for a
//! structured output per function (summary, suggested name, maliciousness
//! score), then score those outputs for consistency, classifier fidelity and
//! semantic relevance of app-level descriptions. A renaming harness feeds
//! suggested names back into the code and measures the effect.

pub mod backend;
pub mod config;
pub mod consistency;
pub mod corpus;
pub mod error;
pub mod fidelity;
pub mod jsonl;
pub mod pipeline;
pub mod prompt;
pub mod rename;
pub mod report;
pub mod semantic;
pub mod synth;
pub mod text;

pub use error::{Error, Field, Result};
