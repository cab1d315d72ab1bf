//! Differentiable generalized-exponential splatting.
//!
//! Forward: project 3D Gaussians to screen-space splats, sort by view depth,
//! alpha-composite color and depth front to back. Backward: analytic
//! gradients of a pixel loss with respect to every Gaussian parameter on the
//! unconstrained parameterization.

mod backward;
mod forward;
mod project;

pub use backward::{render_backward, GaussianGradients};
pub use forward::{render, RenderOutput};
pub use project::{ges_weight, project, project_point};

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::camera::CameraFrame;
use crate::gaussian::GaussianMap;

/// Rasterization constants. Defaults mirror common splatting practice.
#[derive(Debug, Clone)]
pub struct RenderConfig {
    /// Near-plane cull distance in scene units.
    pub znear: f64,
    /// Cull/coverage margin in projected standard deviations.
    pub cull_margin: f64,
    /// Low-pass floor added to the 2D covariance diagonal, px^2.
    pub lowpass_floor: f64,
    /// Per-splat alpha ceiling.
    pub alpha_clamp: f64,
    /// Front-to-back compositing stops below this transmittance.
    pub min_transmittance: f64,
    /// Splats with a worse-conditioned 2D covariance are skipped.
    pub max_condition: f64,
    /// Background color composited under the remaining transmittance.
    pub background: [f64; 3],
    /// Edge length of the square pixel tiles.
    pub tile_size: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            znear: 0.01,
            cull_margin: 3.0,
            lowpass_floor: 0.3,
            alpha_clamp: 0.999,
            min_transmittance: 1e-4,
            max_condition: 1e8,
            background: [0.0, 0.0, 0.0],
            tile_size: 16,
        }
    }
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone)]
pub struct Splat2D {
    /// Projected mean, pixel coordinates.
    pub mean2d: Vector2<f64>,
    /// Projected covariance after the low-pass floor, px^2.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// View-space depth of the mean.
    pub z: f64,
    /// Index into the source [`GaussianMap`].
    pub gaussian_index: usize,
    /// Shape exponent copied from the source Gaussian.
    pub beta: f64,
    /// Coverage half-width: `cull_margin * sqrt(max eigenvalue of cov2d)`.
    pub radius: f64,
}

impl Splat2D {
    /// Square coverage test shared by forward, backward, and visibility.
    #[inline]
    pub fn covers(&self, px: f64, py: f64) -> bool {
        (px - self.mean2d.x).abs() <= self.radius && (py - self.mean2d.y).abs() <= self.radius
    }
}

/// Depth-sorted splats with per-splat appearance, plus per-tile index lists.
/// Shared by the forward pass, the backward pass, and visibility scoring so
/// culling and ordering are identical everywhere.
pub(crate) struct SplatBatch {
    pub splats: Vec<Splat2D>,
    pub colors: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub tiles_x: usize,
    /// Splat indices (into `splats`) per tile, in global z order.
    pub tile_lists: Vec<Vec<u32>>,
}

pub(crate) fn prepare(map: &GaussianMap, frame: &CameraFrame, cfg: &RenderConfig) -> SplatBatch {
    let intr = &frame.intrinsics;
    let mut splats: Vec<Splat2D> = map
        .gaussians()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, &frame.pose, intr, cfg).map(|mut s| {
            s.gaussian_index = i;
            s
        }))
        .collect();
    // Global front-to-back order; index tiebreak keeps the sort total.
    splats.sort_unstable_by(|a, b| {
        a.z.partial_cmp(&b.z)
            .unwrap()
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });

    let colors: Vec<Vector3<f64>> = splats
        .iter()
        .map(|s| map.gaussians()[s.gaussian_index].color())
        .collect();
    let opacities: Vec<f64> = splats
        .iter()
        .map(|s| map.gaussians()[s.gaussian_index].opacity())
        .collect();

    let tile = cfg.tile_size.max(1);
    let tiles_x = intr.width.div_ceil(tile);
    let tiles_y = intr.height.div_ceil(tile);
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let x0 = ((s.mean2d.x - s.radius).floor().max(0.0) as usize).min(intr.width.saturating_sub(1));
        let x1 = ((s.mean2d.x + s.radius).ceil().max(0.0) as usize).min(intr.width.saturating_sub(1));
        let y0 = ((s.mean2d.y - s.radius).floor().max(0.0) as usize).min(intr.height.saturating_sub(1));
        let y1 = ((s.mean2d.y + s.radius).ceil().max(0.0) as usize).min(intr.height.saturating_sub(1));
        for ty in (y0 / tile)..=(y1 / tile) {
            for tx in (x0 / tile)..=(x1 / tile) {
                tile_lists[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    SplatBatch {
        splats,
        colors,
        opacities,
        tiles_x,

        tile_lists,
    }
}
