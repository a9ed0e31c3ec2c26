//! Dual-fused modality-aware RGBD tracking at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: dense f64 tensors, a reverse-mode tape, finite-difference checks
//!   and the checkpoint container.
//! - [`attention`]: scaled dot-product and multi-head attention, the FFN, 2D sine
//!   positional encodings and the cross-modal attention (CMA) block.
//! - [`fusion`]: the cross-modal integration module, the specificity preserving
//!   module and the element-wise baseline used for ablations.
//! - [`model`]: backbone, Gaussian labels, filter-learning classifier, box
//!   regression and losses.
//! - [`pipeline`]: training loop and the online tracker.
//! - [`synthdata`]: deterministic synthetic RGBD sequences and cropping.
//! - [`evalkit`]: overlap, success/AUC, long-term precision/recall/F.
//! - [`cli`]: the `dmfuse` command surface.

pub mod attention;
pub mod bbox;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod synthdata;

pub use bbox::BBox;
pub use error::{Error, Result};
