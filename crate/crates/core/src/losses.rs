//! Training objectives and image-quality metrics.
//!
//! L1, windowed SSIM, masked depth L1, and depth smoothness, combined into
//! the keyframe / non-keyframe losses. Each combined loss also returns the
//! per-pixel color and depth adjoints the rasterizer backward pass consumes.

use serde::{Deserialize, Serialize};

use crate::camera::CameraFrame;
use crate::error::{Error, Result};
use crate::image::{ImageRgb, ScalarMap};
use crate::rasterizer::RenderOutput;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Rendered alpha must exceed this for a pixel to enter the depth L1 term.
pub const DEPTH_ALPHA_GATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub depth: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // lambda_L1, lambda_SSIM, lambda_depth, lambda_smooth
        LossWeights {
            l1: 0.95,
            ssim: 0.2,
            depth: 0.2,
            smooth: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.l1 < 0.0 || self.ssim < 0.0 || self.depth < 0.0 || self.smooth < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pixel adjoints feeding `render_backward`.
#[derive(Debug, Clone)]
pub struct LossAdjoints {
    pub d_color: ImageRgb,
    pub d_depth: ScalarMap,
}

/// Mean absolute difference over all pixels and channels.
pub fn l1(rendered: &ImageRgb, target: &ImageRgb) -> Result<f64> {
    rendered.same_shape(target)?;
    let n = rendered.as_slice().len() as f64;
    let sum: f64 = rendered
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / n)
}

fn l1_backward(rendered: &ImageRgb, target: &ImageRgb, scale: f64, out: &mut ImageRgb) {
    let n = rendered.as_slice().len() as f64;
    for ((o, a), b) in out
        .as_mut_slice()
        .iter_mut()
        .zip(rendered.as_slice())
        .zip(target.as_slice())
    {
        *o += scale * (a - b).signum() / n;
    }
}

/// Intermediates of one SSIM evaluation, kept for the backward pass.
struct SsimPlane {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    sigma_x2: Vec<f64>,
    sigma_y2: Vec<f64>,
    sigma_xy: Vec<f64>,
    vw: usize,
    vh: usize,
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode filter: `out` is (w - W + 1) x (h - W + 1).
fn filter_valid(plane: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + x + k];
            }
            horiz[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * horiz[(y + k) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Adjoint of `filter_valid`: scatters window-center values back to pixels.
fn filter_valid_adjoint(
    adj: &[f64],
    w: usize,
    h: usize,
    kernel: &[f64; SSIM_WINDOW],
) -> Vec<f64> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; vw * h];
    for y in 0..vh {
        for x in 0..vw {
            let v = adj[y * vw + x];
            if v == 0.0 {
                continue;
            }
            for (k, kv) in kernel.iter().enumerate() {
                horiz[(y + k) * vw + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..vw {
            let v = horiz[y * vw + x];
            if v == 0.0 {
                continue;
            }
            for (k, kv) in kernel.iter().enumerate() {
                out[y * w + x + k] += kv * v;
            }
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize) -> SsimPlane {
    let kernel = gaussian_kernel();
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mu_x = filter_valid(x, w, h, &kernel);
    let mu_y = filter_valid(y, w, h, &kernel);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let e_xx = filter_valid(&xx, w, h, &kernel);
    let e_yy = filter_valid(&yy, w, h, &kernel);
    let e_xy = filter_valid(&xy, w, h, &kernel);
    let mut sigma_x2 = vec![0.0; vw * vh];
    let mut sigma_y2 = vec![0.0; vw * vh];
    let mut sigma_xy = vec![0.0; vw * vh];
    for i in 0..vw * vh {
        sigma_x2[i] = e_xx[i] - mu_x[i] * mu_x[i];
        sigma_y2[i] = e_yy[i] - mu_y[i] * mu_y[i];
        sigma_xy[i] = e_xy[i] - mu_x[i] * mu_y[i];
    }
    SsimPlane {
        mu_x,
        mu_y,
        sigma_x2,
        sigma_y2,
        sigma_xy,
        vw,
        vh,
    }
}

fn ssim_value_of_plane(p: &SsimPlane) -> f64 {
    let mut sum = 0.0;
    for i in 0..p.vw * p.vh {
        let a1 = 2.0 * p.mu_x[i] * p.mu_y[i] + SSIM_C1;
        let a2 = 2.0 * p.sigma_xy[i] + SSIM_C2;
        let b1 = p.mu_x[i] * p.mu_x[i] + p.mu_y[i] * p.mu_y[i] + SSIM_C1;
        let b2 = p.sigma_x2[i] + p.sigma_y2[i] + SSIM_C2;
        sum += (a1 * a2) / (b1 * b2);
    }
    sum / (p.vw * p.vh) as f64
}

fn check_ssim_dims(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    a.same_shape(b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            op: "ssim",
            min: SSIM_WINDOW,
            width: w,
            height: h,
        });
    }
    Ok(())
}

/// Mean local SSIM over valid 11x11 windows, averaged across channels.
pub fn ssim(rendered: &ImageRgb, target: &ImageRgb) -> Result<f64> {
    check_ssim_dims(rendered, target)?;
    let (w, h) = rendered.dims();
    let mut total = 0.0;
    for c in 0..3 {
        let x = rendered.channel(c);
        let y = target.channel(c);
        total += ssim_value_of_plane(&ssim_plane(&x, &y, w, h));
    }
    Ok(total / 3.0)
}

/// Accumulates `scale * d(mean SSIM)/d(rendered)` into `out`.
fn ssim_backward(rendered: &ImageRgb, target: &ImageRgb, scale: f64, out: &mut ImageRgb) {
    let (w, h) = rendered.dims();
    let kernel = gaussian_kernel();
    for c in 0..3 {
        let x = rendered.channel(c);
        let y = target.channel(c);
        let p = ssim_plane(&x, &y, w, h);
        let norm = scale / (3.0 * (p.vw * p.vh) as f64);

        let n = p.vw * p.vh;
        let mut g_mu = vec![0.0; n];
        let mut g_exx = vec![0.0; n];
        let mut g_exy = vec![0.0; n];
        for i in 0..n {
            let m1 = p.mu_x[i];
            let m2 = p.mu_y[i];
            let a1 = 2.0 * m1 * m2 + SSIM_C1;
            let a2 = 2.0 * p.sigma_xy[i] + SSIM_C2;
            let b1 = m1 * m1 + m2 * m2 + SSIM_C1;
            let b2 = p.sigma_x2[i] + p.sigma_y2[i] + SSIM_C2;
            let inv_b1b2 = 1.0 / (b1 * b2);
            let s = a1 * a2 * inv_b1b2;

            let ds_da1 = a2 * inv_b1b2;
            let ds_da2 = a1 * inv_b1b2;
            let ds_db1 = -s / b1;
            let ds_db2 = -s / b2;

            // sigma_x2 = e_xx - m1^2, sigma_xy = e_xy - m1 m2.
            g_mu[i] = norm
                * (ds_da1 * 2.0 * m2 + ds_da2 * (-2.0 * m2) + ds_db1 * 2.0 * m1
                    + ds_db2 * (-2.0 * m1));
            g_exx[i] = norm * ds_db2;
            g_exy[i] = norm * (ds_da2 * 2.0);
        }

        let back_mu = filter_valid_adjoint(&g_mu, w, h, &kernel);
        let back_exx = filter_valid_adjoint(&g_exx, w, h, &kernel);
        let back_exy = filter_valid_adjoint(&g_exy, w, h, &kernel);
        let slice = out.as_mut_slice();
        for i in 0..w * h {
            slice[i * 3 + c] += back_mu[i] + 2.0 * x[i] * back_exx[i] + y[i] * back_exy[i];
        }
    }
}

/// Mean absolute depth difference over masked pixels; 0 when the mask is empty.
pub fn depth_l1(rendered: &ScalarMap, target: &ScalarMap, mask: &[bool]) -> Result<f64> {
    rendered.same_shape(target)?;
    if mask.len() != rendered.as_slice().len() {
        return Err(Error::ShapeMismatch {
            expected: (rendered.as_slice().len(), 1),
            got: (mask.len(), 1),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((r, t), &m) in rendered.as_slice().iter().zip(target.as_slice()).zip(mask) {
        if m {
            sum += (r - t).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn depth_l1_backward(
    rendered: &ScalarMap,
    target: &ScalarMap,
    mask: &[bool],
    scale: f64,
    out: &mut ScalarMap,
) {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return;
    }
    let inv = scale / count as f64;
    for ((o, (r, t)), &m) in out
        .as_mut_slice()
        .iter_mut()
        .zip(rendered.as_slice().iter().zip(target.as_slice()))
        .zip(mask)
    {
        if m {
            *o += inv * (r - t).signum();
        }
    }
}

/// Mean absolute depth difference between horizontal and vertical neighbors.
pub fn smoothness(depth: &ScalarMap) -> Result<f64> {
    let (w, h) = depth.dims();
    if w < 2 || h < 2 {
        return Err(Error::Degenerate(format!(
            "smoothness needs at least 2x2, got {w}x{h}"
        )));
    }
    let nx = (h * (w - 1)) as f64;
    let ny = ((h - 1) * w) as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..h {
        for x in 0..w - 1 {
            sx += (depth.get(x, y) - depth.get(x + 1, y)).abs();
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            sy += (depth.get(x, y) - depth.get(x, y + 1)).abs();
        }
    }
    Ok(sx / nx + sy / ny)
}

fn smoothness_backward(depth: &ScalarMap, scale: f64, out: &mut ScalarMap) {
    let (w, h) = depth.dims();
    let nx = (h * (w - 1)) as f64;
    let ny = ((h - 1) * w) as f64;
    for y in 0..h {
        for x in 0..w - 1 {
            let s = (depth.get(x, y) - depth.get(x + 1, y)).signum() * scale / nx;
            out.add(x, y, s);
            out.add(x + 1, y, -s);
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            let s = (depth.get(x, y) - depth.get(x, y + 1)).signum() * scale / ny;
            out.add(x, y, s);
            out.add(x, y + 1, -s);
        }
    }
}

/// Peak signal-to-noise ratio in dB on the [0, 1] range, capped for
/// identical images.
pub fn psnr(rendered: &ImageRgb, target: &ImageRgb) -> Result<f64> {
    rendered.same_shape(target)?;
    let n = rendered.as_slice().len() as f64;
    let mse: f64 = rendered
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Keyframe objective:
/// `l1*L1 + ssim*(1 - SSIM) + depth*DepthL1 + smooth*Smooth(rendered depth)`.
///
/// The depth term is masked to pixels with valid target depth and rendered
/// alpha above [`DEPTH_ALPHA_GATE`]. Smoothness penalizes the rendered depth
/// so it stays differentiable for depth-less frames too.
pub fn keyframe_loss(
    outputs: &RenderOutput,
    frame: &CameraFrame,
    w: &LossWeights,
) -> Result<(f64, LossAdjoints)> {
    let target_depth = frame.depth().ok_or(Error::MissingDepth(frame.id))?;
    let mask: Vec<bool> = target_depth
        .as_slice()
        .iter()
        .zip(outputs.alpha.as_slice())
        .map(|(&d, &a)| d > 0.0 && a > DEPTH_ALPHA_GATE)
        .collect();

    let mut total = 0.0;
    let (iw, ih) = outputs.color.dims();
    let mut adj = LossAdjoints {
        d_color: ImageRgb::zeros(iw, ih),
        d_depth: ScalarMap::zeros(iw, ih),
    };

    if w.l1 != 0.0 {
        total += w.l1 * l1(&outputs.color, frame.image())?;
        l1_backward(&outputs.color, frame.image(), w.l1, &mut adj.d_color);
    }
    if w.ssim != 0.0 {
        total += w.ssim * (1.0 - ssim(&outputs.color, frame.image())?);
        ssim_backward(&outputs.color, frame.image(), -w.ssim, &mut adj.d_color);
    }
    if w.depth != 0.0 {
        total += w.depth * depth_l1(&outputs.depth, target_depth, &mask)?;
        depth_l1_backward(&outputs.depth, target_depth, &mask, w.depth, &mut adj.d_depth);
    }
    if w.smooth != 0.0 {
        total += w.smooth * smoothness(&outputs.depth)?;
        smoothness_backward(&outputs.depth, w.smooth, &mut adj.d_depth);
    }
    Ok((total, adj))
}

/// Non-keyframe objective: the keyframe loss without the depth term.
pub fn nonkeyframe_loss(
    outputs: &RenderOutput,
    frame: &CameraFrame,
    w: &LossWeights,
) -> Result<(f64, LossAdjoints)> {
    let mut total = 0.0;
    let (iw, ih) = outputs.color.dims();
    let mut adj = LossAdjoints {
        d_color: ImageRgb::zeros(iw, ih),
        d_depth: ScalarMap::zeros(iw, ih),
    };

    if w.l1 != 0.0 {
        total += w.l1 * l1(&outputs.color, frame.image())?;
        l1_backward(&outputs.color, frame.image(), w.l1, &mut adj.d_color);
    }
    if w.ssim != 0.0 {
        total += w.ssim * (1.0 - ssim(&outputs.color, frame.image())?);
        ssim_backward(&outputs.color, frame.image(), -w.ssim, &mut adj.d_color);
    }
    if w.smooth != 0.0 {
        total += w.smooth * smoothness(&outputs.depth)?;
        smoothness_backward(&outputs.depth, w.smooth, &mut adj.d_depth);
    }
    Ok((total, adj))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, k: f64) -> ImageRgb {
        ImageRgb::from_fn(w, h, |x, y| {
            [
                (x as f64 * k).fract(),
                (y as f64 * k * 0.7).fract(),
                ((x + y) as f64 * k * 0.3).fract(),
            ]
        })
    }

    #[test]
    fn l1_identical_and_extremes() {
        let a = ramp(16, 16, 0.13);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        let z = ImageRgb::zeros(8, 8);
        let mut o = ImageRgb::zeros(8, 8);
        o.as_mut_slice().fill(1.0);
        assert_eq!(l1(&z, &o).unwrap(), 1.0);
        assert!(l1(&z, &ImageRgb::zeros(4, 4)).is_err());
    }

    #[test]
    fn ssim_self_similarity_is_one() {
        let a = ramp(20, 14, 0.217);
        let v = ssim(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn ssim_constant_zero_vs_one_matches_closed_form() {
        let z = ImageRgb::zeros(16, 16);
        let mut o = ImageRgb::zeros(16, 16);
        o.as_mut_slice().fill(1.0);
        let v = ssim(&z, &o).unwrap();
        // (C1 * C2) / ((1 + C1) * C2) = 1e-4 / 1.0001
        assert!((v - 9.999000099990002e-5).abs() < 1e-15, "got {v}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImageRgb::zeros(10, 16);
        assert!(matches!(
            ssim(&a, &a),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn ssim_symmetric() {
        let a = ramp(17, 13, 0.31);
        let b = ramp(17, 13, 0.11);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn depth_l1_mask_semantics() {
        let a = ScalarMap::from_fn(4, 4, |x, y| (x + y) as f64);
        let full = vec![true; 16];
        assert_eq!(depth_l1(&a, &a, &full).unwrap(), 0.0);
        let empty = vec![false; 16];
        let b = ScalarMap::from_fn(4, 4, |_, _| 100.0);
        assert_eq!(depth_l1(&a, &b, &empty).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_hand_expansion() {
        let flat = ScalarMap::from_fn(5, 5, |_, _| 3.7);
        assert_eq!(smoothness(&flat).unwrap(), 0.0);

        // [[0,1],[0,1]]: horizontal pairs |0-1| twice over Nx=2 -> 1, vertical 0.
        let m = ScalarMap::from_raw(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(smoothness(&m).unwrap(), 1.0);

        assert!(smoothness(&ScalarMap::zeros(1, 5)).is_err());
    }

    #[test]
    fn smoothness_translation_invariant() {
        let a = ScalarMap::from_fn(7, 6, |x, y| ((x * 31 + y * 17) % 13) as f64 * 0.37);
        let b = ScalarMap::from_raw(7, 6, a.as_slice().iter().map(|v| v + 5.3).collect()).unwrap();
        let va = smoothness(&a).unwrap();
        let vb = smoothness(&b).unwrap();
        assert!((va - vb).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ramp(8, 8, 0.19);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        // MSE = 0.01 -> 20 dB.
        let z = ImageRgb::zeros(8, 8);
        let mut o = ImageRgb::zeros(8, 8);
        o.as_mut_slice().fill(0.1);
        let v = psnr(&z, &o).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "got {v}");
    }
}
