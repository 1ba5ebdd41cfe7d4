//! Few-shot recognition with residual prediction from mid-level features.
//!
//! A backbone is trained on base classes with a cosine classifier plus two
//! auxiliary terms: every sample's final feature is reconstructed from the
//! prototypes of the *other* classes, and the part that cannot be
//! reconstructed (the residual) must be predicted from pooled mid-layer
//! features. At test time two novel-class features are available: a
//! weighted concatenation of normalized mid-features for distant domains,
//! and reconstruction plus predicted residual for in/near domains.

// `!(x > y)` is used on purpose to reject NaN along with small values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod domaindist;
pub mod episodic;
pub mod error;
pub mod geometry;
pub mod network;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{PrototypeBank, Residual, SplitReconstruction};

pub use domaindist::{PadConfig, PadReport};
pub use episodic::{EpisodeConfig, EvalSummary, FeatureMode};
pub use network::{BackboneConfig, Network};
pub use objectives::{LossConfig, Objective};
pub use trainer::{Checkpoint, TrainConfig, TrainState};
