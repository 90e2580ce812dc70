//! Differentiable core of occlusion-aware self-supervised monocular depth
//! estimation for endoscopy.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: pinhole camera, rigid transforms and the view-synthesis warp field.
//! - [`sampler`]: bilinear sampling with exact adjoints.
//! - [`losses`]: photometric, masked depth, edge-aware smoothness and semantic
//!   consistency objectives, each returning analytic gradients.
//! - [`nmf`]: filter-bank features, multiplicative-update NMF and segmentation
//!   pseudo-labels.
//! - [`augment`]: occlusion-mask augmentation and warped depth pseudo-labels.
//! - [`metrics`]: depth evaluation statistics.
//! - [`synth`]: analytic plane/tube scenes used as ground-truth oracles.
//! - [`train`]: a per-pixel toy model trained by plain gradient descent.
//! - [`gradcheck`]: central finite-difference verification of every gradient path.
//! - [`io`]: PFM, PNG, JSON and CSV file formats.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nmf;
pub mod sampler;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use grid::{DepthMap, Grid, Image, Mask};
