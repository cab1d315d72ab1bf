//! Camera frames: posed images with optional depth.

use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose};
use crate::image::{ImageRgb, ScalarMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRole {
    Keyframe,
    NonKeyframe,
}

/// A posed observation. Keyframes carry depth; non-keyframes never do.
#[derive(Debug, Clone)]
pub struct CameraFrame {
    pub id: u64,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    image: ImageRgb,
    depth: Option<ScalarMap>,
    role: FrameRole,
}

impl CameraFrame {
    pub fn keyframe(
        id: u64,
        pose: Pose,
        intrinsics: Intrinsics,
        image: ImageRgb,
        depth: ScalarMap,
    ) -> Result<Self> {
        Self::check_dims(&intrinsics, &image)?;
        if depth.dims() != image.dims() {
            return Err(Error::ShapeMismatch {
                expected: image.dims(),
                got: depth.dims(),
            });
        }
        Ok(CameraFrame {
            id,
            pose,
            intrinsics,
            image,
            depth: Some(depth),
            role: FrameRole::Keyframe,
        })
    }

    pub fn non_keyframe(
        id: u64,
        pose: Pose,
        intrinsics: Intrinsics,
        image: ImageRgb,
    ) -> Result<Self> {
        Self::check_dims(&intrinsics, &image)?;
        Ok(CameraFrame {
            id,
            pose,
            intrinsics,
            image,
            depth: None,
            role: FrameRole::NonKeyframe,
        })
    }

    fn check_dims(intrinsics: &Intrinsics, image: &ImageRgb) -> Result<()> {
        intrinsics.validate()?;
        if image.dims() != (intrinsics.width, intrinsics.height) {
            return Err(Error::ShapeMismatch {
                expected: (intrinsics.width, intrinsics.height),
                got: image.dims(),
            });
        }
        Ok(())
    }

    pub fn role(&self) -> FrameRole {
        self.role
    }

    pub fn is_keyframe(&self) -> bool {
        self.role == FrameRole::Keyframe
    }

    pub fn image(&self) -> &ImageRgb {
        &self.image
    }

    pub fn depth(&self) -> Option<&ScalarMap> {
        self.depth.as_ref()
    }

    /// Downgrade to a non-keyframe, discarding depth.
    pub fn into_non_keyframe(self) -> CameraFrame {
        CameraFrame {
            depth: None,
            role: FrameRole::NonKeyframe,
            ..self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap()
    }

    #[test]
    fn keyframe_requires_matching_depth() {
        let img = ImageRgb::zeros(32, 32);
        let ok = CameraFrame::keyframe(0, Pose::identity(), intr(), img.clone(), ScalarMap::zeros(32, 32));
        assert!(ok.is_ok());
        let bad = CameraFrame::keyframe(0, Pose::identity(), intr(), img, ScalarMap::zeros(16, 16));
        assert!(bad.is_err());
    }

    #[test]
    fn non_keyframe_never_has_depth() {
        let img = ImageRgb::zeros(32, 32);
        let kf =
            CameraFrame::keyframe(0, Pose::identity(), intr(), img, ScalarMap::zeros(32, 32)).unwrap();
        let nkf = kf.into_non_keyframe();
        assert!(nkf.depth().is_none());
        assert_eq!(nkf.role(), FrameRole::NonKeyframe);
    }
}
