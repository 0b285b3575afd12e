//! histoseg — a segmentation toolkit for gigapixel histology rasters.
//!
//! The crate bundles:
//!
//! - a multi-scale U-Net (`MS U-Net`) whose encoder blocks extract features
//!   with parallel kernel sets at scales 1, 2 and 4, plus a plain U-Net
//!   baseline for controlled comparisons (`model`),
//! - label-noise robust losses: fuzzy-boundary confidence weighting,
//!   bootstrap pseudo-label loss with epoch gating, class-weighted
//!   cross-entropy and center-crop masking (`losses`),
//! - a patch pipeline for large rasters: overlapping tile planning,
//!   rotation-safe extraction from oversized windows, and center-crop
//!   stitching back to slide level (`patching`),
//! - dataset handling with a synthetic generator and label corruption for
//!   desk-scale verification (`ingestion`),
//! - slide-level IoU scoring and TP/FP/FN overlays (`evaluation`),
//! - a reproducible training loop with checkpointing (`training`) driven by
//!   a single TOML run configuration (`config`, `cli`).
//!
//! Everything runs on CPU with deterministic results for a fixed seed.

pub mod error;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
