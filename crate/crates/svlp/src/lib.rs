//! Desk-scale, rehearsal-free domain-incremental learning engine.
//!
//! The crate trains a miniature dual encoder (patch-transformer image side,
//! token-transformer text side, shared embedding space) across a sequence of
//! domains without revisiting old data. Three mechanisms carry the method:
//!
//! * **Multi-aspect prompting** — per-domain visual prompt tokens plus four
//!   text prompt families (domain-agnostic, domain-specific, mixed, fixed)
//!   whose cosine logits are blended by learned softmax weights.
//! * **Selective weight consolidation** — a diagonal-Fisher quadratic penalty
//!   anchored to every past optimum, restricted to the union of each domain's
//!   top-p most important backbone coordinates.
//! * **Prototype routing** — per-domain k-means centroids in the shared
//!   embedding space select which prompt set to apply at inference.
//!
//! Fine-tuning and joint-training baselines, PAD metrics (HTER/AUC, routing
//! accuracy, the normalized forgetting gap), and a deterministic synthetic
//! multi-domain data generator make the stability/plasticity behavior
//! reproducible and testable end to end.
//!
//! See the `examples/` directory for one runnable walkthrough per capability,
//! and the `svlp` binary for the `gen-data` / `train` / `eval` / `verify`
//! command-line surface.

pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod map;
pub mod metrics;
pub mod numcore;
pub mod rng;
pub mod routing;
pub mod sewc;
pub mod synthdata;
pub mod trainer;
pub mod verifykit;

pub use error::{Error, Result};
