//! Forward pass: front-to-back alpha compositing of color and depth.

use nalgebra::Vector2;
use rayon::prelude::*;

use super::project::ges_weight_from_q;
use super::{prepare, RenderConfig, SplatBatch};
use crate::camera::CameraFrame;
use crate::gaussian::GaussianMap;
use crate::image::{ImageRgb, ScalarMap};

/// Rendered color, unnormalized depth, accumulated opacity, and per-pixel
/// contribution counts.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ImageRgb,
    pub depth: ScalarMap,
    pub alpha: ScalarMap,
    pub contrib_counts: Vec<u32>,
}

struct TileBuffer {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    color: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    counts: Vec<u32>,
}

pub fn render(map: &GaussianMap, frame: &CameraFrame, cfg: &RenderConfig) -> RenderOutput {
    let batch = prepare(map, frame, cfg);
    render_prepared(&batch, frame, cfg)
}

pub(crate) fn render_prepared(
    batch: &SplatBatch,
    frame: &CameraFrame,
    cfg: &RenderConfig,
) -> RenderOutput {
    let (width, height) = (frame.intrinsics.width, frame.intrinsics.height);
    let tile = cfg.tile_size.max(1);

    let tiles: Vec<TileBuffer> = (0..batch.tile_lists.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % batch.tiles_x;
            let ty = ti / batch.tiles_x;
            let x0 = tx * tile;
            let y0 = ty * tile;
            let w = tile.min(width - x0);
            let h = tile.min(height - y0);
            let mut buf = TileBuffer {
                x0,
                y0,
                w,
                h,
                color: vec![0.0; w * h * 3],
                depth: vec![0.0; w * h],
                alpha: vec![0.0; w * h],
                counts: vec![0; w * h],
            };
            render_tile(batch, &batch.tile_lists[ti], cfg, &mut buf);
            buf
        })
        .collect();

    let mut color = ImageRgb::zeros(width, height);
    let mut depth = ScalarMap::zeros(width, height);
    let mut alpha = ScalarMap::zeros(width, height);
    let mut counts = vec![0u32; width * height];
    for t in tiles {
        for dy in 0..t.h {
            for dx in 0..t.w {
                let (x, y) = (t.x0 + dx, t.y0 + dy);
                let i = dy * t.w + dx;
                color.set_pixel(x, y, [t.color[i * 3], t.color[i * 3 + 1], t.color[i * 3 + 2]]);
                depth.set(x, y, t.depth[i]);
                alpha.set(x, y, t.alpha[i]);
                counts[y * width + x] = t.counts[i];
            }
        }
    }

    RenderOutput {
        color,
        depth,
        alpha,
        contrib_counts: counts,
    }
}

fn render_tile(batch: &SplatBatch, list: &[u32], cfg: &RenderConfig, buf: &mut TileBuffer) {
    for dy in 0..buf.h {
        for dx in 0..buf.w {
            let px = (buf.x0 + dx) as f64 + 0.5;
            let py = (buf.y0 + dy) as f64 + 0.5;
            let pixel = Vector2::new(px, py);

            let mut transmittance = 1.0_f64;
            let mut c = [0.0_f64; 3];
            let mut d = 0.0_f64;
            let mut n = 0u32;
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
                let w = ges_weight_from_q(q, s.beta);
                let a = (batch.opacities[si as usize] * w).min(cfg.alpha_clamp);
                if a <= 0.0 {
                    continue;
                }
                let col = batch.colors[si as usize];
                let wgt = a * transmittance;
                c[0] += col.x * wgt;
                c[1] += col.y * wgt;
                c[2] += col.z * wgt;
                d += s.z * wgt;
                n += 1;
                transmittance *= 1.0 - a;
            }
            c[0] += transmittance * cfg.background[0];
            c[1] += transmittance * cfg.background[1];
            c[2] += transmittance * cfg.background[2];

            let i = dy * buf.w + dx;
            buf.color[i * 3] = c[0];
            buf.color[i * 3 + 1] = c[1];
            buf.color[i * 3 + 2] = c[2];
            buf.depth[i] = d;
            buf.alpha[i] = 1.0 - transmittance;
            buf.counts[i] = n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use crate::geom::{Intrinsics, Pose};
    use approx::assert_relative_eq;
    use nalgebra::{UnitQuaternion, Vector3};

    fn small_frame() -> CameraFrame {
        let intr = Intrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap();
        CameraFrame::non_keyframe(0, Pose::identity(), intr, ImageRgb::zeros(32, 32)).unwrap()
    }

    fn map_with(gaussians: Vec<Gaussian>) -> GaussianMap {
        let mut map = GaussianMap::new();
        map.register_keyframe(0, Pose::identity());
        for g in gaussians {
            map.push(g).unwrap();
        }
        map
    }

    #[test]
    fn empty_map_renders_background() {
        let map = map_with(vec![]);
        let cfg = RenderConfig {
            background: [0.25, 0.5, 0.75],
            ..RenderConfig::default()
        };
        let out = render(&map, &small_frame(), &cfg);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(out.color.pixel(x, y), [0.25, 0.5, 0.75]);
                assert_eq!(out.depth.get(x, y), 0.0);
                assert_eq!(out.alpha.get(x, y), 0.0);
            }
        }
    }

    #[test]
    fn single_opaque_gaussian_dominates_center_pixel() {
        let g = Gaussian::new(
            Vector3::new(0.0, 0.0, 2.0),
            UnitQuaternion::identity(),
            Vector3::new(2.0, 2.0, 2.0),
            0.999,
            Vector3::new(0.2, 0.6, 0.9),
            1.0,
            0,
        );
        let map = map_with(vec![g]);
        let cfg = RenderConfig {
            background: [1.0, 1.0, 1.0],
            alpha_clamp: 0.9995,
            ..RenderConfig::default()
        };
        let out = render(&map, &small_frame(), &cfg);
        // Center pixel (offset 0.5 px from the mean, huge splat): weight ~ 1.
        let got = out.color.pixel(16, 16);
        let expect = [
            0.999 * 0.2 + 0.001,
            0.999 * 0.6 + 0.001,
            0.999 * 0.9 + 0.001,
        ];
        for c in 0..3 {
            assert_relative_eq!(got[c], expect[c], epsilon = 1e-5);
        }
        assert_relative_eq!(out.depth.get(16, 16), 0.999 * 2.0, epsilon = 1e-4);
    }

    #[test]
    fn two_splat_front_to_back_expansion() {
        let near = Gaussian::new(
            Vector3::new(0.0, 0.0, 1.0),
            UnitQuaternion::identity(),
            Vector3::new(3.0, 3.0, 3.0),
            0.5,
            Vector3::new(1.0, 0.0, 0.0),
            1.0,
            0,
        );
        let far = Gaussian::new(
            Vector3::new(0.0, 0.0, 2.0),
            UnitQuaternion::identity(),
            Vector3::new(6.0, 6.0, 6.0),
            0.5,
            Vector3::new(0.0, 0.0, 1.0),
            1.0,
            0,
        );
        let map = map_with(vec![far, near]);
        let cfg = RenderConfig {
            background: [0.0, 1.0, 0.0],
            ..RenderConfig::default()
        };
        let out = render(&map, &small_frame(), &cfg);
        let got = out.color.pixel(16, 16);
        // 0.5 red + 0.25 blue + 0.25 background green, up to the sub-pixel
        // falloff of the two huge splats.
        assert_relative_eq!(got[0], 0.5, epsilon = 2e-3);
        assert_relative_eq!(got[1], 0.25, epsilon = 2e-3);
        assert_relative_eq!(got[2], 0.25, epsilon = 2e-3);
        assert_eq!(out.contrib_counts[16 * 32 + 16], 2);
    }

    #[test]
    fn depth_zero_exactly_where_alpha_zero() {
        let g = Gaussian::new(
            Vector3::new(0.0, 0.0, 3.0),
            UnitQuaternion::identity(),
            Vector3::new(0.05, 0.05, 0.05),
            0.8,
            Vector3::new(1.0, 1.0, 1.0),
            2.0,
            0,
        );
        let map = map_with(vec![g]);
        let out = render(&map, &small_frame(), &RenderConfig::default());
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(
                    out.alpha.get(x, y) == 0.0,
                    out.depth.get(x, y) == 0.0,
                    "alpha/depth zero sets must coincide at ({x},{y})"
                );
            }
        }
    }
}
