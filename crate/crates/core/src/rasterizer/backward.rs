//! Reverse-mode gradients of the compositing equations.
//!
//! Per pixel the loss adjoints are pulled back through alpha blending to
//! per-splat screen-space gradients (mean2d, conic, depth, color, opacity,
//! beta), then once per splat through the projection to the unconstrained
//! Gaussian parameters: position, rotation tangent, log-scale,
//! logit-opacity, color, log-beta.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::project::ges_weight_from_q;
use super::{prepare, RenderConfig, SplatBatch};
use crate::camera::CameraFrame;
use crate::error::{Error, Result};
use crate::gaussian::GaussianMap;
use crate::image::{ImageRgb, ScalarMap};

/// Quadratic forms below this are treated as sitting exactly on the splat
/// center, where the GES kernel is locally flat.
const Q_GUARD: f64 = 1e-12;

/// Per-Gaussian loss gradients on the unconstrained parameterization,
/// aligned with the source map's indices. Culled Gaussians hold zeros.
#[derive(Debug, Clone)]
pub struct GaussianGradients {
    pub d_position: Vec<Vector3<f64>>,
    pub d_rotation: Vec<Vector3<f64>>,
    pub d_log_scale: Vec<Vector3<f64>>,
    pub d_logit_opacity: Vec<f64>,
    pub d_color: Vec<Vector3<f64>>,
    pub d_log_beta: Vec<f64>,
}

impl GaussianGradients {
    pub fn zeros(n: usize) -> Self {
        GaussianGradients {
            d_position: vec![Vector3::zeros(); n],
            d_rotation: vec![Vector3::zeros(); n],
            d_log_scale: vec![Vector3::zeros(); n],
            d_logit_opacity: vec![0.0; n],
            d_color: vec![Vector3::zeros(); n],
            d_log_beta: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_position.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.d_position.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_rotation.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_logit_opacity.iter().all(|x| x.is_finite())
            && self.d_color.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_log_beta.iter().all(|x| x.is_finite())
    }
}

/// Screen-space gradient accumulator for one splat.
#[derive(Debug, Clone, Copy)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    z: f64,
    color: Vector3<f64>,
    opacity: f64,
    beta: f64,
}

impl SplatGrad {
    fn zero() -> Self {
        SplatGrad {
            mean2d: Vector2::zeros(),
            conic: Matrix2::zeros(),
            z: 0.0,
            color: Vector3::zeros(),
            opacity: 0.0,
            beta: 0.0,
        }
    }

    fn add(&mut self, other: &SplatGrad) {
        self.mean2d += other.mean2d;
        self.conic += other.conic;
        self.z += other.z;
        self.color += other.color;
        self.opacity += other.opacity;
        self.beta += other.beta;
    }
}

/// Analytic gradients of the pixel loss whose color (and optionally depth)
/// adjoints are given. Positional gradient magnitudes are folded into each
/// Gaussian's `grad_accum` running mean, every Gaussian counting one sample.
pub fn render_backward(
    map: &mut GaussianMap,
    frame: &CameraFrame,
    d_color: &ImageRgb,
    d_depth: Option<&ScalarMap>,
    cfg: &RenderConfig,
) -> Result<GaussianGradients> {
    let (width, height) = (frame.intrinsics.width, frame.intrinsics.height);
    if d_color.dims() != (width, height) {
        return Err(Error::ShapeMismatch {
            expected: (width, height),
            got: d_color.dims(),
        });
    }
    if let Some(dd) = d_depth {
        if dd.dims() != (width, height) {
            return Err(Error::ShapeMismatch {
                expected: (width, height),
                got: dd.dims(),
            });
        }
    }

    let batch = prepare(map, frame, cfg);
    let tile = cfg.tile_size.max(1);

    // Per tile: (splat index, accumulated screen-space gradient).
    let tile_grads: Vec<Vec<(u32, SplatGrad)>> = (0..batch.tile_lists.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % batch.tiles_x;
            let ty = ti / batch.tiles_x;
            let x0 = tx * tile;
            let y0 = ty * tile;
            let w = tile.min(width - x0);
            let h = tile.min(height - y0);
            backward_tile(&batch, &batch.tile_lists[ti], cfg, d_color, d_depth, x0, y0, w, h)
        })
        .collect();

    // Deterministic merge in tile order.
    let mut per_splat = vec![SplatGrad::zero(); batch.splats.len()];
    for tg in tile_grads {
        for (si, g) in tg {
            per_splat[si as usize].add(&g);
        }
    }

    let mut grads = GaussianGradients::zeros(map.len());
    for (si, sg) in per_splat.iter().enumerate() {
        let splat = &batch.splats[si];
        let gi = splat.gaussian_index;
        let g = &map.gaussians()[gi];
        chain_to_parameters(sg, splat, g, frame, &mut grads, gi);
    }

    for (i, g) in map.gaussians_mut().iter_mut().enumerate() {
        g.push_grad_sample(grads.d_position[i].norm());
    }

    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn backward_tile(
    batch: &SplatBatch,
    list: &[u32],
    cfg: &RenderConfig,
    d_color: &ImageRgb,
    d_depth: Option<&ScalarMap>,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
) -> Vec<(u32, SplatGrad)> {
    let mut local: Vec<(u32, SplatGrad)> = list.iter().map(|&si| (si, SplatGrad::zero())).collect();
    // Maps splat index -> position in `local`.
    let slot_of = |si: u32, local: &Vec<(u32, SplatGrad)>| -> usize {
        local.binary_search_by_key(&si, |&(s, _)| s).unwrap()
    };

    // Scratch: one entry per splat composited at the current pixel.
    let mut walk: Vec<(u32, f64, f64, f64, f64)> = Vec::with_capacity(list.len());
    // fields: (splat idx, alpha, weight, q, transmittance before splat)

    for dy in 0..h {
        for dx in 0..w {
            let (x, y) = (x0 + dx, y0 + dy);
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let pixel = Vector2::new(px, py);

            let a_col = d_color.pixel(x, y);
            let adj_color = Vector3::new(a_col[0], a_col[1], a_col[2]);
            let adj_depth = d_depth.map_or(0.0, |dd| dd.get(x, y));
            if adj_color == Vector3::zeros() && adj_depth == 0.0 {
                continue;
            }

            // Forward walk, recording the compositing state per splat.
            walk.clear();
            let mut transmittance = 1.0_f64;
            for &si in list {
                if transmittance < cfg.min_transmittance {
                    break;
                }
                let s = &batch.splats[si as usize];
                if !s.covers(px, py) {
                    continue;
                }
                let off = pixel - s.mean2d;
                let q = 0.5
                    * (off.x * (s.conic[(0, 0)] * off.x + s.conic[(0, 1)] * off.y)
                        + off.y * (s.conic[(1, 0)] * off.x + s.conic[(1, 1)] * off.y));
                let wgt = ges_weight_from_q(q, s.beta);
                let a = (batch.opacities[si as usize] * wgt).min(cfg.alpha_clamp);
                if a <= 0.0 {
                    continue;
                }
                walk.push((si, a, wgt, q, transmittance));
                transmittance *= 1.0 - a;
            }

            // Suffix sums: contributions behind the current splat, background
            // included for color.
            let bg = Vector3::new(cfg.background[0], cfg.background[1], cfg.background[2]);
            let mut suffix_color = transmittance * bg;
            let mut suffix_depth = 0.0_f64;

            for &(si, a, wgt, q, t_before) in walk.iter().rev() {
                let s = &batch.splats[si as usize];
                let color = batch.colors[si as usize];
                let opacity = batch.opacities[si as usize];

                let slot = slot_of(si, &local);
                let acc = &mut local[slot].1;

                // Direct color / depth contributions.
                acc.color += adj_color * (a * t_before);
                acc.z += adj_depth * a * t_before;

                // d(pixel)/d(alpha): own term plus occlusion of everything behind.
                let one_minus_a = 1.0 - a;
                let g_alpha = adj_color.dot(&(color * t_before - suffix_color / one_minus_a))
                    + adj_depth * (s.z * t_before - suffix_depth / one_minus_a);

                suffix_color += color * (a * t_before);
                suffix_depth += s.z * (a * t_before);

                // Alpha clamp: gradient does not flow into opacity or shape.
                if opacity * wgt >= cfg.alpha_clamp {
                    continue;
                }

                acc.opacity += g_alpha * wgt;
                let g_weight = g_alpha * opacity;

                if q < Q_GUARD {
                    // Kernel locally flat at the center; only opacity moves alpha.
                    continue;
                }
                // w = exp(-q^beta)
                let q_pow_beta = q.powf(s.beta);
                let g_q = -s.beta * q.powf(s.beta - 1.0) * wgt * g_weight;
                acc.beta += -q_pow_beta * q.ln() * wgt * g_weight;

                // q = offset^T conic offset / 2
                let off = pixel - s.mean2d;
                let conic_off = s.conic * off;
                acc.mean2d += -g_q * conic_off;
                // dq/dconic = off off^T / 2 (full-matrix convention).
                let half_outer = 0.5 * off * off.transpose();
                acc.conic += g_q * half_outer;
            }
        }
    }

    local.retain(|(_, g)| {
        g.mean2d != Vector2::zeros()
            || g.conic != Matrix2::zeros()
            || g.z != 0.0
            || g.color != Vector3::zeros()
            || g.opacity != 0.0
            || g.beta != 0.0
    });
    local
}

/// Pull one splat's screen-space gradient back to Gaussian parameters.
fn chain_to_parameters(
    sg: &SplatGrad,
    splat: &super::Splat2D,
    g: &crate::gaussian::Gaussian,
    frame: &CameraFrame,
    grads: &mut GaussianGradients,
    gi: usize,
) {
    let intr = &frame.intrinsics;
    let pose = &frame.pose;
    let w = *pose.rotation().inverse().to_rotation_matrix().matrix();
    let x_cam = w * (g.position() - pose.translation());
    let (fx, fy) = (intr.fx, intr.fy);
    let inv_z = 1.0 / x_cam.z;
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;

    let j = Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * x_cam.x * inv_z2,
        0.0,
        fy * inv_z,
        -fy * x_cam.y * inv_z2,
    );

    // cov2d = J M J^T + floor, with M = W Sigma W^T.
    let sigma = g.covariance();
    let m = w * sigma * w.transpose();

    // Conic gradient -> covariance gradient: dL/dcov = -conic G_conic conic.
    // Both factors are symmetric by construction.
    let g_cov = -splat.conic * sg.conic * splat.conic;

    // Sigma chain.
    let g_m = j.transpose() * g_cov * j;
    let g_sigma = w.transpose() * g_m * w;

    // J chain (cov2d depends on the camera-space mean through J).
    let g_j: Matrix2x3<f64> = 2.0 * g_cov * j * m;

    // Camera-space mean gradient: mean2d path + J path + direct depth path.
    let mut g_xcam = j.transpose() * sg.mean2d;
    g_xcam.z += sg.z;
    g_xcam.x += g_j[(0, 2)] * (-fx * inv_z2);
    g_xcam.y += g_j[(1, 2)] * (-fy * inv_z2);
    g_xcam.z += g_j[(0, 0)] * (-fx * inv_z2)
        + g_j[(1, 1)] * (-fy * inv_z2)
        + g_j[(0, 2)] * (2.0 * fx * x_cam.x * inv_z3)
        + g_j[(1, 2)] * (2.0 * fy * x_cam.y * inv_z3);

    grads.d_position[gi] += w.transpose() * g_xcam;

    // Scale: Sigma = R diag(exp(2 ls)) R^T.
    let r = *g.rotation().to_rotation_matrix().matrix();
    let a = r.transpose() * g_sigma * r;
    let s = g.scale();
    grads.d_log_scale[gi] += Vector3::new(
        a[(0, 0)] * 2.0 * s.x * s.x,
        a[(1, 1)] * 2.0 * s.y * s.y,
        a[(2, 2)] * 2.0 * s.z * s.z,
    );

    // Rotation tangent (right perturbation R * Exp(delta)):
    // dSigma/ddelta_k = R (E_k D - D E_k) R^T with D = diag(s^2).
    let d = Matrix3::from_diagonal(&s.map(|v| v * v));
    for k in 0..3 {
        let e = skew_basis(k);
        let b = e * d - d * e;
        let dsig = r * b * r.transpose();
        grads.d_rotation[gi][k] += g_sigma.component_mul(&dsig).sum();
    }

    // Opacity through the sigmoid.
    let o = g.opacity();
    grads.d_logit_opacity[gi] += sg.opacity * o * (1.0 - o);

    grads.d_color[gi] += sg.color;

    // Beta through the log store.
    grads.d_log_beta[gi] += sg.beta * splat.beta;
}

fn skew_basis(k: usize) -> Matrix3<f64> {
    match k {
        0 => Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
        1 => Matrix3::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0),
        _ => Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use crate::geom::{Intrinsics, Pose};
    use nalgebra::UnitQuaternion;

    #[test]
    fn zero_adjoint_means_zero_gradients() {
        let intr = Intrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap();
        let frame =
            CameraFrame::non_keyframe(0, Pose::identity(), intr, ImageRgb::zeros(32, 32)).unwrap();
        let mut map = GaussianMap::new();
        map.register_keyframe(0, Pose::identity());
        map.push(Gaussian::new(
            Vector3::new(0.0, 0.0, 2.0),
            UnitQuaternion::identity(),
            Vector3::new(0.5, 0.5, 0.5),
            0.8,
            Vector3::new(0.3, 0.3, 0.3),
            1.0,
            0,
        ))
        .unwrap();

        let g = render_backward(
            &mut map,
            &frame,
            &ImageRgb::zeros(32, 32),
            Some(&ScalarMap::zeros(32, 32)),
            &RenderConfig::default(),
        )
        .unwrap();
        assert_eq!(g.d_position[0], Vector3::zeros());
        assert_eq!(g.d_rotation[0], Vector3::zeros());
        assert_eq!(g.d_log_scale[0], Vector3::zeros());
        assert_eq!(g.d_logit_opacity[0], 0.0);
        assert_eq!(g.d_color[0], Vector3::zeros());
        assert_eq!(g.d_log_beta[0], 0.0);
        assert!(g.all_finite());
    }

    #[test]
    fn rejects_mismatched_adjoint_shape() {
        let intr = Intrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap();
        let frame =
            CameraFrame::non_keyframe(0, Pose::identity(), intr, ImageRgb::zeros(32, 32)).unwrap();
        let mut map = GaussianMap::new();
        let err = render_backward(
            &mut map,
            &frame,
            &ImageRgb::zeros(16, 16),
            None,
            &RenderConfig::default(),
        );
        assert!(err.is_err());
    }
}
