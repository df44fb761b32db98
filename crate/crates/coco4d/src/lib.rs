//! Desk-scale 4D scene generation.
//!
//! The pipeline reconstructs and animates a foreground object from a
//! reference video, expands and animates a background through a progressive
//! inpaint-project-optimize loop, and composes both with depth-aware
//! screen-space math into a renderable dynamic Gaussian scene.
//!
//! All generative models (video generation, segmentation, depth estimation,
//! inpainting, score functions) live behind the [`backends`] interfaces with
//! deterministic mock implementations, so the full pipeline runs and is
//! testable without any pretrained weights.

pub mod background;
pub mod backends;
pub mod composer;
pub mod config;
pub mod error;
pub mod geometry;
pub mod img;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod video_io;

pub mod foreground;

pub use error::{CocoError, Result};
