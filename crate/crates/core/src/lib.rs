//! Structured adversarial patches against stereo depth estimation.
//!
//! A patch is assembled from a small optimisable texture element, placed on a
//! planar board in front of a calibrated stereo rig, composited into both views
//! and optimised so a differentiable matcher mis-estimates depth.

pub mod attack;
pub mod deploy;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod matcher;
pub mod metrics;
pub mod patch;

pub use error::{Error, Result};
pub use image::{DisparityMap, Image, Mask};
