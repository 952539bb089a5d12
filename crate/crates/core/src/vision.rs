//! Camera-side geometry: stereo depth, pixel back-projection, the
//! camera-to-world transform and extraction of steering angles from a world
//! position.
//!
//! Camera frame: `+x` right, `+y` down, `+z` forward. The world frame shares
//! the array's axes; the array origin sits `h` metres from the camera origin
//! along the vertical axis so the direction from the array to a world point
//! `(x, y, z)` is `(x, y + h, z)`.

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DoaAngles, Vec3};

const ORTHONORMAL_TOL: f64 = 1e-10;

/// Pinhole camera with intrinsics `K` and pose `(R, t)` mapping camera
/// coordinates to world coordinates (`p_world = R p_cam + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    intrinsics_inv: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vec3,
    focal_length: f64,
    baseline: Option<f64>,
}

impl CameraModel {
    pub fn new(intrinsics: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !intrinsics.iter().chain(rotation.iter()).chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("camera parameters must be finite"));
        }
        if intrinsics[(2, 2)] != 1.0 {
            return Err(Error::invalid(format!(
                "intrinsics K[2][2] must be 1, got {}",
                intrinsics[(2, 2)]
            )));
        }
        let intrinsics_inv = intrinsics
            .try_inverse()
            .ok_or_else(|| Error::invalid("intrinsics matrix is singular"))?;
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).amax() > ORTHONORMAL_TOL {
            return Err(Error::invalid("rotation is not orthonormal"));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid("rotation must have determinant +1"));
        }
        let focal_length = intrinsics[(0, 0)];
        if focal_length <= 0.0 {
            return Err(Error::invalid("focal length must be positive"));
        }
        Ok(Self {
            intrinsics,
            intrinsics_inv,
            rotation,
            translation,
            focal_length,
            baseline: None,
        })
    }

    /// Camera with identity pose.
    pub fn with_intrinsics(intrinsics: Matrix3<f64>) -> Result<Self> {
        Self::new(intrinsics, Matrix3::identity(), Vec3::zeros())
    }

    /// Standard pinhole intrinsics with square pixels.
    pub fn pinhole(focal_px: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::with_intrinsics(Matrix3::new(focal_px, 0.0, cx, 0.0, focal_px, cy, 0.0, 0.0, 1.0))
    }

    /// 1280x720 camera with a 700 px focal length and identity pose.
    pub fn default_hd() -> Self {
        Self::pinhole(700.0, 640.0, 360.0).expect("default camera is valid")
    }

    pub fn with_stereo_baseline(mut self, baseline: f64) -> Result<Self> {
        if !(baseline.is_finite() && baseline > 0.0) {
            return Err(Error::invalid(format!("stereo baseline must be > 0, got {baseline}")));
        }
        self.baseline = Some(baseline);
        Ok(self)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn focal_length(&self) -> f64 {
        self.focal_length
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    /// Stereo depth of a disparity using this camera's focal length and baseline.
    pub fn depth_from_disparity(&self, disparity: f64) -> Result<f64> {
        let baseline = self
            .baseline
            .ok_or_else(|| Error::invalid("camera has no stereo baseline"))?;
        triangulate_depth(self.focal_length, baseline, disparity)
    }
}

/// Vertical offset `h` between the camera and array origins, metres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MountingOffset(pub f64);

/// One detector output: bounding-box centroid and size (pixels), depth
/// (metres) and the shared-clock timestamp (seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub t_s: f64,
    pub x_px: f64,
    pub y_px: f64,
    pub w_px: f64,
    pub h_px: f64,
    pub depth_m: f64,
    pub target_label: String,
}

impl DetectionEvent {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_m.is_finite() && self.depth_m > 0.0) {
            return Err(Error::domain(format!("detection depth must be > 0, got {}", self.depth_m)));
        }
        if !(self.w_px >= 0.0 && self.h_px >= 0.0) {
            return Err(Error::domain("detection box size must be non-negative"));
        }
        if !(self.t_s.is_finite() && self.x_px.is_finite() && self.y_px.is_finite()) {
            return Err(Error::domain("detection has non-finite timestamp or centroid"));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vector2<f64> {
        Vector2::new(self.x_px, self.y_px)
    }
}

/// Stereo depth `f * B / d`.
pub fn triangulate_depth(focal_px: f64, baseline_m: f64, disparity_px: f64) -> Result<f64> {
    if !(disparity_px > 0.0) {
        return Err(Error::domain(format!("disparity must be > 0, got {disparity_px}")));
    }
    if !(focal_px > 0.0) || !(baseline_m > 0.0) {
        return Err(Error::domain("focal length and baseline must be > 0"));
    }
    Ok(focal_px * baseline_m / disparity_px)
}

/// Camera-frame position of a pixel at the given depth: `depth * K^-1 [x, y, 1]`.
pub fn back_project(camera: &CameraModel, pixel: Vector2<f64>, depth: f64) -> Result<Vec3> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::domain(format!("depth must be > 0, got {depth}")));
    }
    Ok(depth * (camera.intrinsics_inv * Vec3::new(pixel.x, pixel.y, 1.0)))
}

pub fn to_world(camera: &CameraModel, p_cam: &Vec3) -> Vec3 {
    camera.rotation * p_cam + camera.translation
}

/// Projects a world point into the image. Returns the pixel and the depth
/// that [`back_project`] needs to recover the point.
pub fn project_to_pixel(camera: &CameraModel, p_world: &Vec3) -> Result<(Vector2<f64>, f64)> {
    let p_cam = camera.rotation.transpose() * (p_world - camera.translation);
    let q = camera.intrinsics * p_cam;
    if !(p_cam.z > 0.0 && q.z > 0.0) {
        return Err(Error::domain(format!(
            "point {:?} is behind the camera",
            p_world.as_slice()
        )));
    }
    Ok((Vector2::new(q.x / q.z, q.y / q.z), q.z))
}

/// Steering angles of a world position:
/// `phi = pi - atan(x / z)`, `theta = atan((y + h) / z)`.
pub fn doa_from_position(p_world: &Vec3, offset: MountingOffset) -> Result<DoaAngles> {
    if !(p_world.z > 0.0) {
        return Err(Error::domain(format!(
            "target at {:?} is not in front of the array",
            p_world.as_slice()
        )));
    }
    DoaAngles::from_direction(&array_relative(p_world, offset))
}

/// Direction from the array origin to a world point (not normalised).
pub fn array_relative(p_world: &Vec3, offset: MountingOffset) -> Vec3 {
    Vec3::new(p_world.x, p_world.y + offset.0, p_world.z)
}

/// Full detection-to-steering chain: back-project the centroid, move to the
/// world frame and extract angles.
pub fn detection_to_doa(camera: &CameraModel, offset: MountingOffset, event: &DetectionEvent) -> Result<DoaAngles> {
    event.validate()?;
    let p_cam = back_project(camera, event.centroid(), event.depth_m)?;
    doa_from_position(&to_world(camera, &p_cam), offset)
}
