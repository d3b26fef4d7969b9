//! Low-entropy segment shaping for group-based policy optimization.
//!
//! Responses sampled for one query are split by per-token entropy into
//! high-entropy positions, short low-entropy fragments and longer low-entropy
//! segments. Segments are pooled across the group, deduplicated by
//! containment and counted over correct and incorrect responses; the counts
//! then rescale each token's group-relative advantage before the clipped
//! surrogate update.
//!
//! Module map:
//!
//! * [`rollout`]: domain types and the line-oriented record format.
//! * [`segmentation`]: entropy thresholding and span extraction.
//! * [`registry`]: group-level maximal segment set with correct/incorrect counts.
//! * [`shaping`]: piecewise rescaling of token advantages.
//! * [`grpo`]: group-relative advantages and the clipped surrogate objective.
//! * [`analysis`]: overlap ratios, correlation, entropy ratio and sampling metrics.
//! * [`simulator`]: toy verifiable task, tabular policy and training loop.

pub mod analysis;
pub mod error;
pub mod grpo;
pub mod registry;
pub mod rollout;
pub mod segmentation;
pub mod shaping;
pub mod simulator;

pub use error::{Error, Result};
pub use rollout::{Response, RolloutGroup, TokenId, TokenRecord};
