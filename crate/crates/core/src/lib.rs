//! Core engine for the self-improvement data pipeline and the
//! text→image→text cycle-consistency benchmark.
//!
//! The pipeline treats every neural model as a remote endpoint behind the
//! [`gateway`] client (with a deterministic in-process mock for offline runs)
//! and moves data through five stages: prompt proposal, image rollouts,
//! rubric judging, rejection-sampling curation, and training-record
//! construction. The [`unicycle`] module runs the companion benchmark and
//! computes its soft/hard consistency metrics. All randomness derives from a
//! single master seed and all scores are exact rationals, so every artifact
//! a run writes is reproducible byte for byte.

pub mod categories;
pub mod config;
pub mod cpr;
pub mod curation;
pub mod gateway;
pub mod judge;
pub mod parallel;
pub mod pipeline;
pub mod proposer;
pub mod rational;
pub mod rng;
pub mod salvage;
pub mod solver;
pub mod store;
pub mod unicycle;

pub use config::PipelineConfig;
pub use rational::Rational;
pub use store::{ContentKind, ContentRef, Store};
