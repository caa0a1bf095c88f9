//! Formation discovery and role alignment for multi-agent tracking data.
//!
//! The pipeline learns an unordered set of per-role Gaussian distributions
//! (a [`Formation`](discovery::Formation)) with a soft-assignment mixture
//! model, orders it against a parent [`Template`](alignment::Template), and
//! maps every frame's unordered agents onto that ordering with a per-frame
//! optimal assignment.
//!
//! Interchangeable algorithm families (formation learners, template
//! alignment costs, initializers) are exposed through named strategy
//! registries in [`registry`], so callers can pick a variant at runtime.

pub mod alignment;
pub mod assignment;
pub mod baseline;
pub mod bench;
pub mod clustering;
pub mod compare;
pub mod discovery;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod kmeans;
pub mod numeric;
pub mod registry;
pub mod synth;

pub use error::{Error, Result};
