//! Dataset engineering and evaluation for concrete honeycomb detection.
//!
//! The crate turns COCO instance-segmentation datasets into patch
//! classification datasets, evaluates detectors and patch classifiers,
//! localizes defects by tiled scoring with Grad-CAM composites, and keeps
//! the bookkeeping for expert qualitative review.
//!
//! Data-parallel loops go through [`par::Exec`]. With the default `parallel`
//! feature they run on rayon; without it every loop is sequential.

pub mod clsmetrics;
pub mod cocostore;
pub mod detmetrics;
pub mod maskgeom;
pub mod par;
pub mod patchgen;
pub mod review;
pub mod tileinfer;

/// Version string embedded in every artifact header.
pub const TOOL_VERSION: &str = concat!("hic ", env!("CARGO_PKG_VERSION"));

pub use par::Exec;
