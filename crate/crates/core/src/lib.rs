//! Desk-scale defect synthesis by token-anchored masked autoregressive editing,
//! and anomaly-detector training with quality-aware sample weights.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`synthgen`] and [`prompting`] build a seeded corpus of normal textures,
//!    anomaly masks and structured defect prompts.
//! 2. [`codec`] quantizes images patch-wise into a [`codec::TokenLattice`].
//! 3. [`armodel`] learns a conditional categorical model over tokens, and
//!    [`sampler`] uses it to resample only the masked tokens while copying
//!    every context token verbatim.
//! 4. [`qaw`] scores each synthetic sample by prompt/image consistency and
//!    turns the scores into self-normalized weights.
//! 5. [`detector`] trains a patch scorer on the weighted risk and evaluates
//!    image- and pixel-level AUROC.

pub mod armodel;
pub mod codec;
pub mod detector;
pub mod experiment;
pub mod imagery;
pub mod prompting;
pub mod qaw;
pub mod rng;
pub mod sampler;
pub mod synthgen;

pub use armodel::ArModel;
pub use codec::{Codebook, IndexPartition, TokenLattice};
pub use detector::{Heatmap, PatchScorer};
pub use imagery::{Image, PixelMask};
pub use prompting::{PromptEmbedding, PromptRecord};
pub use qaw::{Calibration, WeightConfig, WeightReport};
pub use sampler::{EditRequest, EditResult};
