//! Perspective projection of Gaussians and the GES falloff kernel.

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};

use super::{RenderConfig, Splat2D};
use crate::gaussian::Gaussian;
use crate::geom::{Intrinsics, Pose};

/// Pinhole projection of a world point. Returns `(pixel, view depth)` or
/// `None` when the point is behind the near plane.
pub fn project_point(
    pose: &Pose,
    intr: &Intrinsics,
    point: &Vector3<f64>,
) -> Option<(Vector2<f64>, f64)> {
    let w = pose.inverse();
    let x_cam = w.transform_point(point);
    if x_cam.z <= 0.0 {
        return None;
    }
    let u = intr.fx * x_cam.x / x_cam.z + intr.cx;
    let v = intr.fy * x_cam.y / x_cam.z + intr.cy;
    Some((Vector2::new(u, v), x_cam.z))
}

/// First-order (EWA-style) projection of one Gaussian to a screen splat.
///
/// Returns `None` when the mean sits behind the near plane, the projected
/// mean lies more than the cull margin of projected standard deviations
/// outside the image, or the floored 2D covariance is unusable.
pub fn project(
    g: &Gaussian,
    pose: &Pose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Option<Splat2D> {
    let w_rot = pose.rotation().inverse().to_rotation_matrix();
    let w = *w_rot.matrix();
    let x_cam = w * (g.position() - pose.translation());
    let z = x_cam.z;
    if z <= cfg.znear {
        return None;
    }

    let (fx, fy) = (intr.fx, intr.fy);
    let inv_z = 1.0 / z;
    let mean2d = Vector2::new(fx * x_cam.x * inv_z + intr.cx, fy * x_cam.y * inv_z + intr.cy);

    let j = Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * x_cam.x * inv_z * inv_z,
        0.0,
        fy * inv_z,
        -fy * x_cam.y * inv_z * inv_z,
    );
    let sigma_cam = w * g.covariance() * w.transpose();
    let mut cov2d = j * sigma_cam * j.transpose();
    cov2d[(0, 0)] += cfg.lowpass_floor;
    cov2d[(1, 1)] += cfg.lowpass_floor;
    // Enforce exact symmetry before inverting.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;

    let (lam_min, lam_max) = eigenvalues_2x2(&cov2d);
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
    if !(det > 0.0) || lam_min <= 0.0 || lam_max / lam_min > cfg.max_condition {
        return None;
    }

    let radius = cfg.cull_margin * lam_max.sqrt();
    if mean2d.x < -radius
        || mean2d.x > intr.width as f64 + radius
        || mean2d.y < -radius
        || mean2d.y > intr.height as f64 + radius
    {
        return None;
    }

    let inv_det = 1.0 / det;
    let conic = Matrix2::new(
        cov2d[(1, 1)] * inv_det,
        -off * inv_det,
        -off * inv_det,
        cov2d[(0, 0)] * inv_det,
    );

    Some(Splat2D {
        mean2d,
        cov2d,
        conic,
        z,
        gaussian_index: 0,
        beta: g.beta(),
        radius,
    })
}

/// Eigenvalues of a symmetric 2x2 matrix, `(min, max)`.
pub(crate) fn eigenvalues_2x2(m: &Matrix2<f64>) -> (f64, f64) {
    let half_trace = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (half_trace * half_trace - det).max(0.0).sqrt();
    (half_trace - disc, half_trace + disc)
}

/// GES density restricted to the image plane:
/// `exp(-(d^T cov2d^{-1} d / 2)^beta)` for `d = pixel - mean2d`.
/// Reduces to the plain Gaussian falloff at `beta = 1`.
pub fn ges_weight(splat: &Splat2D, pixel: &Vector2<f64>) -> f64 {
    let d = pixel - splat.mean2d;
    let q = 0.5 * (d.x * (splat.conic[(0, 0)] * d.x + splat.conic[(0, 1)] * d.y)
        + d.y * (splat.conic[(1, 0)] * d.x + splat.conic[(1, 1)] * d.y));
    ges_weight_from_q(q, splat.beta)
}

#[inline]
pub(crate) fn ges_weight_from_q(q: f64, beta: f64) -> f64 {
    if q <= 0.0 {
        return 1.0;
    }
    (-q.powf(beta)).exp()
}
