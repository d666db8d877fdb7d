//! Building blocks for constructing content-aligned real/fake image datasets
//! and evaluating forensic detectors on them.
//!
//! The crate is organised along the data flow of an experiment:
//!
//! - [`manifest`]: real-image ingestion, fake-variant planning, balanced sampling.
//! - [`genclient`]: inpainting requests, the generation sidecar protocol and
//!   background compositing.
//! - [`augment`]: perturbations, augmentation tiers and social-network simulation.
//! - [`detector`]: crop tiling, multi-crop scoring, the spectral toy probe and
//!   early stopping.
//! - [`metrics`]: balanced accuracy, AUC, class-balanced ECE and NLL.
//! - [`spectral`]: averaged power spectra of image differences.
//! - [`audit`]: format/compression bias detection and recompression rebalancing.
//! - [`pipeline`]: config-driven orchestration of all stages.
//! - [`synth`]: synthetic scenes for fixtures and demos.

pub mod audit;
pub mod augment;
pub mod coco;
pub mod detector;
pub mod error;
pub mod genclient;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};

/// Version string recorded in manifests and artifact stamps.
pub const TOOL_VERSION: &str = concat!("alignbench/", env!("CARGO_PKG_VERSION"));
