//! SE(3) poses and pinhole intrinsics.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid world-from-camera transform: `x_world = rotation * x_cam + translation`.
///
/// The quaternion is scalar-first `(w, x, y, z)` and renormalized after every
/// construction and composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    /// Build from raw scalar-first quaternion components; normalizes.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)),
            translation,
        }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: UnitQuaternion::new_normalize(
                (self.rotation * other.rotation).into_inner(),
            ),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Interpolate a fraction `t` from `self` toward `other` along the
    /// SO(3) x R^3 product geodesic (rotation slerp, translation lerp).
    pub fn interpolate(&self, other: &Pose, t: f64) -> Pose {
        let rotation = self
            .rotation
            .try_slerp(&other.rotation, t, 1e-12)
            .unwrap_or(if t < 0.5 { self.rotation } else { other.rotation });
        Pose {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation: self.translation.lerp(&other.translation, t),
        }
    }

    /// Rotation angle (radians) plus translation distance to another pose.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let ang = self.rotation.angle_to(&other.rotation);
        let trans = (self.translation - other.translation).norm();
        (ang, trans)
    }
}

/// Serde representation used for JSON pose files and sidecar headers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRepr {
    /// Scalar-first quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.rotation.into_inner();
        PoseRepr {
            rotation: [q.w, q.i, q.j, q.k],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        Pose::from_wxyz(
            r.rotation[0],
            r.rotation[1],
            r.rotation[2],
            r.rotation[3],
            Vector3::new(r.translation[0], r.translation[1], r.translation[2]),
        )
    }
}

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }
}

/// Numerically safe logistic sigmoid.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid with the argument pulled away from {0, 1}.
pub(crate) fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn compose_with_identity_is_identity_map() {
        let p = Pose::from_wxyz(0.9, 0.1, -0.2, 0.3, Vector3::new(1.0, -2.0, 0.5));
        let q = Pose::identity().compose(&p);
        assert_relative_eq!(
            q.rotation().into_inner().coords,
            p.rotation().into_inner().coords,
            epsilon = 1e-15
        );
        assert_relative_eq!(q.translation(), p.translation(), epsilon = 1e-15);
    }

    #[test]
    fn inverse_round_trips_points() {
        let p = Pose::from_wxyz(0.7, -0.4, 0.2, 0.1, Vector3::new(0.3, 1.7, -2.2));
        let x = Vector3::new(0.5, -1.0, 2.0);
        let back = p.inverse().transform_point(&p.transform_point(&x));
        assert_relative_eq!(back, x, epsilon = 1e-9);
    }

    #[test]
    fn compose_inverse_is_identity() {
        let p = Pose::from_wxyz(0.2, 0.8, -0.1, 0.5, Vector3::new(-4.0, 2.0, 9.0));
        let e = p.compose(&p.inverse());
        let (ang, trans) = e.distance(&Pose::identity());
        assert!(ang < 1e-9, "rotation angle {ang}");
        assert!(trans < 1e-9, "translation norm {trans}");
    }

    #[test]
    fn quaternion_stays_normalized() {
        let mut p = Pose::from_wxyz(3.0, 1.0, -2.0, 0.5, Vector3::zeros());
        for _ in 0..1000 {
            p = p.compose(&Pose::from_wxyz(0.99, 0.01, 0.02, -0.03, Vector3::new(0.1, 0.0, 0.0)));
        }
        assert!((p.rotation().into_inner().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).is_ok());
        assert!(Intrinsics::new(0.0, 100.0, 32.0, 32.0, 64, 64).is_err());
        assert!(Intrinsics::new(100.0, 100.0, 64.0, 32.0, 64, 64).is_err());
        assert!(Intrinsics::new(100.0, 100.0, 32.0, -1.0, 64, 64).is_err());
    }

    #[test]
    fn sigmoid_logit_round_trip() {
        for &p in &[0.005, 0.1, 0.5, 0.9, 0.995] {
            assert_relative_eq!(sigmoid(logit(p)), p, epsilon = 1e-12);
        }
    }
}
