//! Multispectral fluorescence particle analysis.
//!
//! A stack of RGB captures of the same filter, one per illumination
//! condition (excitation wavelength × optical filter), is segmented once on a
//! mask condition with k-means in YCbCr. Every particle is then measured
//! under every condition, giving an HSV spectral fingerprint that is matched
//! against a polymer library by Mahalanobis distance.
//!
//! ```no_run
//! use std::path::Path;
//! use fluoromap::{ingest, pipeline, segment::SegmentationConfig};
//!
//! let manifest = ingest::load_manifest(Path::new("stack.toml"))?;
//! let stack = pipeline::prepare_stack(&manifest, true, ingest::DEFAULT_MAX_SHIFT_PX)?;
//! let seg = pipeline::segment_stack(&stack, &manifest, &SegmentationConfig::default())?;
//! println!("{} particles", seg.labels.regions.len());
//! # Ok::<(), fluoromap::Error>(())
//! ```

pub mod classify;
pub mod colorspace;
pub mod error;
pub mod fingerprint;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod segment;
pub mod synth;

pub use error::{Error, Result};

/// Library version, recorded in run logs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
