//! Splatting primitives and the growable scene map.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geom::{logit, sigmoid, Pose};

/// Storage clamp for the opacity logit; keeps the sigmoid away from saturation.
pub const LOGIT_CLAMP: f64 = 12.0;

/// One generalized-exponential splatting primitive.
///
/// Scale, opacity, and the shape exponent are stored unconstrained
/// (log-scale, logit-opacity, log-beta) so optimizer steps cannot violate
/// positivity or range invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    position: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
    log_scale: Vector3<f64>,
    logit_opacity: f64,
    color: Vector3<f64>,
    log_beta: f64,
    grad_sum: f64,
    grad_samples: u32,
    source_keyframe: u64,
}

impl Gaussian {
    /// Build from constrained values. Scales and beta must be strictly
    /// positive; opacity and color are clamped to their valid ranges.
    pub fn new(
        position: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
        beta: f64,
        source_keyframe: u64,
    ) -> Self {
        assert!(
            scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0,
            "scale components must be strictly positive, got {scale:?}"
        );
        assert!(beta > 0.0, "beta must be strictly positive, got {beta}");
        Gaussian {
            position,
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            log_scale: scale.map(f64::ln),
            logit_opacity: logit(opacity).clamp(-LOGIT_CLAMP, LOGIT_CLAMP),
            color: color.map(|c| c.clamp(0.0, 1.0)),
            log_beta: beta.ln(),
            grad_sum: 0.0,
            grad_samples: 0,
            source_keyframe,
        }
    }

    /// Build directly from the unconstrained parameterization (PLY reload).
    #[allow(clippy::too_many_arguments)]
    pub fn from_unconstrained(
        position: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        log_scale: Vector3<f64>,
        logit_opacity: f64,
        color: Vector3<f64>,
        log_beta: f64,
        source_keyframe: u64,
    ) -> Self {
        Gaussian {
            position,
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            log_scale,
            logit_opacity: logit_opacity.clamp(-LOGIT_CLAMP, LOGIT_CLAMP),
            color: color.map(|c| c.clamp(0.0, 1.0)),
            log_beta,
            grad_sum: 0.0,
            grad_samples: 0,
            source_keyframe,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.position
    }

    pub fn set_position(&mut self, p: Vector3<f64>) {
        self.position = p;
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn set_rotation(&mut self, q: UnitQuaternion<f64>) {
        self.rotation = UnitQuaternion::new_normalize(q.into_inner());
    }

    /// Right-multiplies a tangent-space rotation increment and renormalizes.
    pub fn apply_rotation_tangent(&mut self, delta: Vector3<f64>) {
        let inc = UnitQuaternion::from_scaled_axis(delta);
        self.rotation = UnitQuaternion::new_normalize((self.rotation * inc).into_inner());
    }

    pub fn log_scale(&self) -> Vector3<f64> {
        self.log_scale
    }

    pub fn set_log_scale(&mut self, ls: Vector3<f64>) {
        self.log_scale = ls;
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn logit_opacity(&self) -> f64 {
        self.logit_opacity
    }

    pub fn set_logit_opacity(&mut self, l: f64) {
        self.logit_opacity = l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    pub fn color(&self) -> Vector3<f64> {
        self.color
    }

    pub fn set_color(&mut self, c: Vector3<f64>) {
        self.color = c.map(|v| v.clamp(0.0, 1.0));
    }

    pub fn log_beta(&self) -> f64 {
        self.log_beta
    }

    pub fn set_log_beta(&mut self, lb: f64) {
        self.log_beta = lb;
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn source_keyframe(&self) -> u64 {
        self.source_keyframe
    }

    pub fn set_source_keyframe(&mut self, id: u64) {
        self.source_keyframe = id;
    }

    /// Full 3x3 covariance `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = *self.rotation.to_rotation_matrix().matrix();
        let s2 = self.scale().map(|s| s * s);
        let d = Matrix3::from_diagonal(&s2);
        r * d * r.transpose()
    }

    /// Largest covariance eigenvalue, `max(s^2)` in closed form.
    pub fn max_eigenvalue(&self) -> f64 {
        let s = self.scale();
        (s.x * s.x).max(s.y * s.y).max(s.z * s.z)
    }

    /// Running mean of positional-gradient magnitudes since the last reset.
    pub fn grad_accum(&self) -> f64 {
        if self.grad_samples == 0 {
            0.0
        } else {
            self.grad_sum / self.grad_samples as f64
        }
    }

    pub fn push_grad_sample(&mut self, norm: f64) {
        self.grad_sum += norm;
        self.grad_samples += 1;
    }

    pub fn reset_grad_accum(&mut self) {
        self.grad_sum = 0.0;
        self.grad_samples = 0;
    }

    /// Test/diagnostic hook: overwrite the accumulator with a fixed mean.
    pub fn set_grad_accum(&mut self, value: f64) {
        self.grad_sum = value;
        self.grad_samples = 1;
    }
}

/// The growable scene model: an ordered Gaussian collection plus the pose
/// each source keyframe had when its Gaussians were inserted.
#[derive(Debug, Clone, Default)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian>,
    keyframe_anchors: BTreeMap<u64, Pose>,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn register_keyframe(&mut self, id: u64, pose: Pose) {
        self.keyframe_anchors.insert(id, pose);
    }

    pub fn anchor(&self, id: u64) -> Option<&Pose> {
        self.keyframe_anchors.get(&id)
    }

    pub fn set_anchor(&mut self, id: u64, pose: Pose) -> Result<()> {
        match self.keyframe_anchors.get_mut(&id) {
            Some(p) => {
                *p = pose;
                Ok(())
            }
            None => Err(Error::MissingAnchor(id)),
        }
    }

    pub fn anchors(&self) -> &BTreeMap<u64, Pose> {
        &self.keyframe_anchors
    }

    /// Insert a Gaussian; its source keyframe must already be anchored.
    pub fn push(&mut self, g: Gaussian) -> Result<()> {
        if !self.keyframe_anchors.contains_key(&g.source_keyframe()) {
            return Err(Error::MissingAnchor(g.source_keyframe()));
        }
        self.gaussians.push(g);
        Ok(())
    }

    /// Remove Gaussians failing the predicate, compacting indices.
    /// Returns `remap[old_index] = Some(new_index)` for survivors.
    pub fn retain_with_remap(&mut self, mut keep: impl FnMut(&Gaussian) -> bool) -> Vec<Option<usize>> {
        let mut remap = vec![None; self.gaussians.len()];
        let mut kept = Vec::with_capacity(self.gaussians.len());
        for (i, g) in self.gaussians.drain(..).enumerate() {
            if keep(&g) {
                remap[i] = Some(kept.len());
                kept.push(g);
            }
        }
        self.gaussians = kept;
        remap
    }

    pub fn reset_grad_accum(&mut self) {
        for g in &mut self.gaussians {
            g.reset_grad_accum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    #[test]
    fn covariance_identity_rotation_unit_scale() {
        let g = Gaussian::new(
            Vector3::zeros(),
            UnitQuaternion::identity(),
            Vector3::new(1.0, 1.0, 1.0),
            0.5,
            Vector3::new(0.5, 0.5, 0.5),
            1.0,
            0,
        );
        assert_relative_eq!(g.covariance(), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn covariance_diagonal_case() {
        let g = Gaussian::new(
            Vector3::zeros(),
            UnitQuaternion::identity(),
            Vector3::new(1.0, 2.0, 3.0),
            0.5,
            Vector3::new(0.5, 0.5, 0.5),
            1.0,
            0,
        );
        let expect = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0));
        assert_relative_eq!(g.covariance(), expect, epsilon = 1e-12);
    }

    #[test]
    fn max_eigenvalue_closed_form() {
        let g = Gaussian::new(
            Vector3::zeros(),
            UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -0.7, 0.2)),
            Vector3::new(1.0, 2.0, 3.0),
            0.5,
            Vector3::new(0.5, 0.5, 0.5),
            1.0,
            0,
        );
        assert_relative_eq!(g.max_eigenvalue(), 9.0, epsilon = 1e-12);

        let iso = Gaussian::new(
            Vector3::zeros(),
            UnitQuaternion::identity(),
            Vector3::new(0.1, 0.1, 0.1),
            0.5,
            Vector3::new(0.5, 0.5, 0.5),
            1.0,
            0,
        );
        assert_relative_eq!(iso.max_eigenvalue(), 0.01, epsilon = 1e-15);
    }

    #[test]
    fn opacity_round_trip_and_clamp() {
        let g = Gaussian::new(
            Vector3::zeros(),
            UnitQuaternion::identity(),
            Vector3::new(0.1, 0.1, 0.1),
            0.5,
            Vector3::new(0.0, 0.0, 0.0),
            1.0,
            0,
        );
        assert_relative_eq!(g.opacity(), 0.5, epsilon = 1e-12);

        let mut g2 = g.clone();
        g2.set_logit_opacity(1e9);
        assert!(g2.logit_opacity() <= LOGIT_CLAMP);
        assert!(g2.opacity() < 1.0);
    }

    #[test]
    fn grad_accum_is_running_mean() {
        let mut g = Gaussian::new(
            Vector3::zeros(),
            UnitQuaternion::identity(),
            Vector3::new(0.1, 0.1, 0.1),
            0.5,
            Vector3::new(0.0, 0.0, 0.0),
            1.0,
            0,
        );
        assert_eq!(g.grad_accum(), 0.0);
        g.push_grad_sample(1.0);
        g.push_grad_sample(3.0);
        assert_relative_eq!(g.grad_accum(), 2.0, epsilon = 1e-15);
        g.reset_grad_accum();
        assert_eq!(g.grad_accum(), 0.0);
    }

    #[test]
    fn push_requires_anchor() {
        let mut map = GaussianMap::new();
        let g = Gaussian::new(
            Vector3::zeros(),
            UnitQuaternion::identity(),
            Vector3::new(0.1, 0.1, 0.1),
            0.5,
            Vector3::new(0.0, 0.0, 0.0),
            1.0,
            7,
        );
        assert!(map.push(g.clone()).is_err());
        map.register_keyframe(7, Pose::identity());
        assert!(map.push(g).is_ok());
    }

    #[test]
    fn retain_with_remap_compacts() {
        let mut map = GaussianMap::new();
        map.register_keyframe(0, Pose::identity());
        for i in 0..5 {
            let mut g = Gaussian::new(
                Vector3::new(i as f64, 0.0, 0.0),
                UnitQuaternion::identity(),
                Vector3::new(0.1, 0.1, 0.1),
                0.5,
                Vector3::new(0.0, 0.0, 0.0),
                1.0,
                0,
            );
            g.set_grad_accum(i as f64);
            map.push(g).unwrap();
        }
        let remap = map.retain_with_remap(|g| g.grad_accum() as usize % 2 == 0);
        assert_eq!(map.len(), 3);
        assert_eq!(remap, vec![Some(0), None, Some(1), None, Some(2)]);
        assert_eq!(map.gaussians()[1].position().x, 2.0);
    }
}
