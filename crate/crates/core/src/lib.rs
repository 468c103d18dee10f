//! Stereo distance estimation for small, distant targets.
//!
//! Plain triangulation on detector boxes is biased when the observed target
//! position deviates from the ideal pinhole projection. This crate learns a
//! per-image horizontal offset from the box's polar position and size,
//! compensates the disparity with it, and optionally repeats the correction
//! for samples a learned gate flags as hard.
//!
//! - [`geometry`]: triangulation and feature extraction
//! - [`nn`]: the MLP-Mixer backbone with exact gradients
//! - [`correction`]: offset and gate models, and the gated inference loop
//! - [`training`]: losses, optimizer, schedule and the stage-wise driver
//! - [`simdata`]: synthetic stereo observations and JSONL dataset I/O
//! - [`eval`]: metrics, binned reports and cost accounting

// `!(x > 0.0)` is used on purpose so NaN takes the rejecting branch;
// index loops mirror the tensor layout in the mixer.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod correction;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod rng;
pub mod simdata;
pub mod training;

pub use correction::{CorrectorStack, EstimateTrace, GateModel, InferenceMode, PcmModel};
pub use error::{Error, Result};
pub use geometry::{BoundingBox, FeatureTuple, PolarFeature, StereoRig};
pub use nn::{GradientBuffer, MixerConfig, MixerModel};
pub use simdata::{DatasetRecord, DeviationModel, SceneConfig};
pub use training::{TrainConfig, TrainOutcome};
