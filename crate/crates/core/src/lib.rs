//! World-time and camera conditioning for video diffusion transformers.
//!
//! The crate covers the full desk-scale pipeline: a small reverse-mode
//! tensor substrate ([`tensor`], [`autodiff`]), world-time warps
//! ([`timewarp`]), camera trajectories and Plücker rays ([`camera`]),
//! rotary encodings over continuous time, space and camera pose
//! ([`rope4d`]), feature-level conditioning ([`conditioning`]), a
//! 4D-controllable transformer block ([`ditblock`]), a toy training and
//! ablation harness ([`toytrain`]), evaluation metrics ([`metrics`]) and
//! the scene-manifest generator ([`forge`]).

pub mod autodiff;
pub mod camera;
pub mod conditioning;
pub mod ditblock;
pub mod error;
pub mod forge;
pub mod metrics;
pub mod rope4d;
pub mod seeds;
pub mod tensor;
pub mod timewarp;
pub mod toytrain;

pub use error::{Error, NumericError, Result};
pub use tensor::{ParamSet, Tensor};
