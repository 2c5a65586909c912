//! Tissue detection and evaluation toolkit for whole-slide histopathology
//! images: a classical thresholding segmentation pipeline, patch extraction
//! for downstream diagnostic models, and the statistical harness for
//! comparing two tissue-detection methods.

pub mod concordance;
pub mod metrics;
pub mod morphology;
pub mod phantom;
pub mod pipeline;
pub mod pyramid;
pub mod raster;
pub mod stats;
pub mod tfrecord;
pub mod tiler;

pub use raster::{BinaryMask, GrayField, Kernel, RasterImage};
