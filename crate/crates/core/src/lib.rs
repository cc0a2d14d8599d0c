//! Training-free curation of corner-case image datasets.
//!
//! Noisy crawl results pass through three stages: trimodal filtering with
//! cluster triage ([`filter`]), retrieval voting over three frozen encoders
//! with confidence gating and uncertainty escalation ([`distill`]), and
//! region-evidence relabeling ([`revlm`]). Model inference lives behind the
//! [`sidecar`] boundary; [`pipeline`] drives rounds over a [`project`]
//! directory.

pub mod acquisition;
pub mod config;
pub mod distill;
pub mod error;
pub mod filter;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod project;
pub mod revlm;
pub mod rng;
pub mod sidecar;
pub mod simulate;
pub mod synth;

pub use error::{Error, Result};
