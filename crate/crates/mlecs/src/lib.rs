//! # mlecs
//!
//! A deterministic, desk-scale simulator for collaborative multimodal
//! learning across an edge-cloud boundary. Heterogeneous edge devices hold
//! partial modality sets and train small unified models (modality encoders,
//! a connector, and a LoRA-adapted frozen backbone); a server holds an
//! omni-modal model and coordinates each round:
//!
//! 1. the server distributes fused omni-modal representations of the shared
//!    public data, which devices use as contrastive anchors,
//! 2. devices run cross-modal contrastive learning (CCL) on their public
//!    shard and adaptive multimodal tuning (AMT) on their private data,
//!    then upload their LoRA adapters,
//! 3. the server aggregates adapters with modality-aware weights (MMA),
//!    runs SLM-enhanced contrastive learning (SE-CCL) with bidirectional
//!    pooled-logit knowledge transfer, and redistributes the adapters.
//!
//! Cross-modal alignment is scored by the Gram volume of a set of unit
//! representation vectors: `sqrt(det(AᵀA))` with the vectors as the columns
//! of `A`. Smaller volume means tighter semantic agreement, so the
//! contrastive losses score candidates by `exp(-volume)`.
//!
//! Everything is plain `f64` on the CPU and every source of randomness is
//! a named, seeded stream, so whole experiments replay bit-identically.
//! Start with the runnable examples (`cargo run --example full_experiment`)
//! or the `mlecs` binary (`mlecs run --config cfg.toml`).

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod device;
mod error;
pub mod gradsuite;
pub mod metrics;
pub mod models;
pub mod numeric;
pub mod report;
pub mod rng;
pub mod round;
pub mod server;
pub mod volume;

pub use error::{Error, Result};
