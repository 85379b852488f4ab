//! Response-level saliency attribution for autoregressive vision-language models.
//!
//! The engine consumes serialized generation traces (attention tensors plus
//! per-generated-token attention gradients) and produces:
//!
//! * a visual saliency map over the image patch grid,
//! * a prompt saliency vector over the prompt tokens,
//! * per-token cross-modal relevance scores for the generated response.
//!
//! Relevance is computed per generated token by fusing gradient-weighted
//! attention heads within each layer, weighting layers by gradient evidence
//! and a depth prior, and propagating additively from an identity seed. Token
//! rows are then combined with confidence- and alignment-based weights.
//!
//! Baseline explainers (raw attention, rollout, a Grad-CAM style map, and
//! TMME propagation) and the evaluation metrics used to compare them (NSS,
//! Spearman, deletion/insertion AUC) live alongside the engine.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod error;
pub mod explain;
pub mod grid;
pub mod metrics;
pub mod relevance;
pub mod rng;
pub mod saliency;
pub mod tokens;
pub mod trace;

pub use config::{EngineConfig, TokenConfig, UpdateRule};
pub use error::{Error, Result};
pub use explain::{explain, Explanation, Method};
pub use grid::{Grid, PatchGrid};
pub use trace::{TraceBundle, TraceDims};
