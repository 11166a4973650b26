//! ESI triage prediction and evaluation.
//!
//! Encounters are loaded and curated by [`ingest`], run through one of six
//! prompting pipelines in [`pipelines`] against any [`backend::Backend`], and
//! scored with the triage-error rates in [`metrics`]. [`harness`] drives whole
//! evaluation runs from a configuration file.

pub mod backend;
pub mod domain;
pub mod ensemble;
pub mod harness;
pub mod ingest;
pub mod jsonl;
pub mod metrics;
pub mod pipelines;
pub mod rag;
