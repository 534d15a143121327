//! Document image rectification.
//!
//! The pipeline removes paper deformation from photographed documents in two
//! stages: a geometric unwarping transformer regresses a per-pixel backward
//! mapping field that is applied by bilinear warping, and an illumination
//! correction transformer cleans shading artifacts patch by patch. Everything
//! runs on a small self-contained differentiable tensor engine, so the crate
//! has no machine-learning framework dependency.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode autodiff, optimizer, LR schedule.
//! - [`fields`]: backward mapping fields, bilinear warping, convex upsampling.
//! - [`segmenter`]: foreground document segmentation and background removal.
//! - [`geotr`]: the geometric unwarping transformer and full unwarp pipeline.
//! - [`illtr`]: patch-based illumination correction.
//! - [`metrics`]: local distortion, SSIM/MS-SSIM, edit distance, CER.
//! - [`synthdata`]: synthetic training data with exact ground-truth maps.
//! - [`image`], [`checkpoint`]: PPM/PGM image I/O and weight serialization.

pub mod checkpoint;
pub mod fields;
pub mod geotr;
pub mod illtr;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod segmenter;
pub mod synthdata;
pub mod train;

mod error;

pub use error::{Error, Result};
