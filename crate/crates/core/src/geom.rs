//! Rigid transforms, rays and the yaw-only augmentation utilities.
//!
//! All geometry is `f64`. Frames follow the vehicle convention: x forward,
//! y left, z up.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeomError {
    #[error("rotation is not orthonormal with det +1 (max deviation {0:e})")]
    NotARotation(f64),
    #[error("non-finite pose component")]
    NonFinite,
    #[error("invalid augmentation config: {0}")]
    InvalidAugment(&'static str),
}

/// Rigid transform `x -> R x + t`. Validity is enforced at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeomError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_dev = (rotation.determinant() - 1.0).abs();
        let worst = dev.max(det_dev);
        if worst > ORTHO_TOL {
            return Err(GeomError::NotARotation(worst));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Pose with a yaw rotation about +z followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self {
            rotation: yaw_matrix(yaw),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Heading of the transformed x axis in the x-y plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(&self, b: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * b.rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

pub fn yaw_matrix(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotates `point` by `theta` radians in the x-y plane; z is untouched.
pub fn rotate_about_z(point: &Vec3, theta: f64) -> Vec3 {
    let (s, c) = theta.sin_cos();
    Vec3::new(c * point.x - s * point.y, s * point.x + c * point.y, point.z)
}

/// One lidar ray: either a return at `endpoint` or a miss along `direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Hit point for returns; `origin + max_range * direction` for misses.
    pub endpoint: Vec3,
    /// Unit emission direction.
    pub direction: Vec3,
    pub miss: bool,
    pub time: f64,
}

impl Ray {
    pub fn hit(origin: Vec3, endpoint: Vec3, time: f64) -> Self {
        let d = endpoint - origin;
        debug_assert!(d.norm() > 0.0);
        Self {
            origin,
            endpoint,
            direction: d / d.norm(),
            miss: false,
            time,
        }
    }

    pub fn missed(origin: Vec3, direction: Vec3, max_range: f64, time: f64) -> Self {
        let dir = direction.normalize();
        Self {
            origin,
            endpoint: origin + dir * max_range,
            direction: dir,
            miss: true,
            time,
        }
    }

    pub fn length(&self) -> f64 {
        (self.endpoint - self.origin).norm()
    }

    pub fn transformed(&self, pose: &Pose) -> Ray {
        Ray {
            origin: pose.transform_point(&self.origin),
            endpoint: pose.transform_point(&self.endpoint),
            direction: pose.transform_vector(&self.direction),
            miss: self.miss,
            time: self.time,
        }
    }

    pub fn rotated_about_z(&self, theta: f64) -> Ray {
        Ray {
            origin: rotate_about_z(&self.origin, theta),
            endpoint: rotate_about_z(&self.endpoint, theta),
            direction: rotate_about_z(&self.direction, theta),
            miss: self.miss,
            time: self.time,
        }
    }
}

/// Rotation and jitter augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_enabled: bool,
    pub theta_min: f64,
    pub theta_max: f64,
    /// When set, the rotation angle is fixed instead of drawn.
    pub theta_override: Option<f64>,
    pub jitter_enabled: bool,
    /// Exponent applied to the uniform draw along negative rays.
    pub jitter_tau: f64,
    /// Reserved hook for translation augmentation; not applied.
    pub translation_enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_enabled: true,
            theta_min: (-20.0f64).to_radians(),
            theta_max: 20.0f64.to_radians(),
            theta_override: None,
            jitter_enabled: false,
            jitter_tau: 1.0,
            translation_enabled: false,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            rotation_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.theta_min <= self.theta_max) {
            return Err(GeomError::InvalidAugment("theta_min > theta_max"));
        }
        if !(self.jitter_tau > 0.0) {
            return Err(GeomError::InvalidAugment("jitter_tau must be positive"));
        }
        Ok(())
    }

    /// Exponent used for negative sampling: `jitter_tau` when jitter is on, else 1.
    pub fn effective_tau(&self) -> f64 {
        if self.jitter_enabled {
            self.jitter_tau
        } else {
            1.0
        }
    }
}
