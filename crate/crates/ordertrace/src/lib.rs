//! Desk-scale laboratory for studying how sequential fine-tuning order is
//! encoded in transformer activations.
//!
//! The pipeline: generate an alias-entity QA corpus ([`datagen`]), fine-tune a
//! small decoder-only transformer sequentially on disjoint entity stages
//! ([`model`]), capture per-layer per-token activations on position-aligned
//! test prompts ([`capture`]), then analyze stage geometry ([`geometry`]),
//! train linear probes ([`probes`]), and run statistical-balancing controls
//! ([`controls`]). The [`oracle`] module plants synthetic signals with known
//! ground truth to validate the analysis machinery, and [`experiments`]
//! orchestrates full experiment variants into reproducible run directories.

pub mod capture;
pub mod controls;
pub mod datagen;
pub mod experiments;
pub mod geometry;
pub mod model;
pub mod oracle;
pub mod probes;
pub mod util;

pub use util::derive_seed;
