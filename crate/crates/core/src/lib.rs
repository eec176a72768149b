//! Mutual-information-guided multi-view contrastive learning for 2D lesion
//! segmentation.
//!
//! The crate covers the full method at library level:
//!
//! - [`views`]: subject normalization and patchwise-DCT multi-view cubes.
//! - [`info`]: discrete entropy/MI oracles and a neural (Donsker-Varadhan)
//!   MI estimator with a trainable critic.
//! - [`selection`]: MI-based ranking and top-sigma view selection.
//! - [`contrastive`]: projection heads and single/two/multi-view losses.
//! - [`unet`]: the segmentation backbone plus the parallel frequency branch.
//! - [`train`]: the optimization harness (schedule, augmentation, losses).
//! - [`metrics`]: DSC, mIoU, HD95, and ASD.
//! - [`synth`]: deterministic synthetic lesion volumes for desk-scale runs.
//!
//! IO, file formats, and the command-line tools live in the companion CLI
//! crate; everything here operates on in-memory arrays.

pub mod contrastive;
pub mod data;
pub mod error;
pub mod info;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod selection;
pub mod synth;
pub mod train;
pub mod unet;
pub mod views;

pub use error::{CoreError, Result};
