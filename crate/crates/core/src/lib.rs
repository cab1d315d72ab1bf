//! Online generalized-exponential Gaussian splatting.
//!
//! A CPU backend for incremental 3D Gaussian splatting from posed RGB-D
//! streams: a differentiable GES rasterizer with analytic gradients,
//! photometric/geometric training losses, incremental map construction,
//! rigid map deformation after pose-graph corrections, and
//! uncertainty-driven selection of extra training views. A synthetic
//! frontend and a TUM-RGBD loader stand in for live tracking.

pub mod camera;
pub mod deformation;
pub mod error;
pub mod frontend_sim;
pub mod gaussian;
pub mod geom;
pub mod image;
pub mod io;
pub mod losses;
pub mod mapping;
pub mod nvs;
pub mod pipeline;
pub mod rasterizer;

pub use camera::{CameraFrame, FrameRole};
pub use error::{Error, Result};
pub use gaussian::{Gaussian, GaussianMap};
pub use geom::{Intrinsics, Pose};
pub use image::{ImageRgb, ScalarMap};
pub use rasterizer::{GaussianGradients, RenderConfig, RenderOutput, Splat2D};
