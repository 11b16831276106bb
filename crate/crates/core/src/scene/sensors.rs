use super::{Scene, Surface};
use crate::geom::{Pose, Ray, Vec3};
use crate::par;
use crate::rng::{Domain, RayRng};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

/// Prototype index for pixels that see nothing.
pub const PROTO_SKY: u16 = 0;
pub const PROTO_GROUND: u16 = 1;
/// L-infinity bound of the smooth spatial perturbation added to prototypes.
pub const FEATURE_PERTURBATION: f64 = 0.1;

const FEATURE_SEED: u64 = 0x5eed_fea7;
const MAX_SPATIAL_FREQ: f64 = 0.3;

/// Sensor placement on the vehicle: yaw about +z, then translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mount {
    pub translation: Vec3,
    #[serde(default)]
    pub yaw: f64,
}

impl Mount {
    pub fn pose(&self) -> Pose {
        Pose::from_yaw(self.yaw, self.translation)
    }

    /// Vehicle-from-camera pose for an optical frame (x right, y down, z forward).
    pub fn camera_pose(&self) -> Pose {
        let optical = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let base = self.pose();
        Pose::new(base.rotation() * optical, self.translation).expect("optical frame is a rotation")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPattern {
    pub azimuth_count: usize,
    pub elevation_count: usize,
    /// Radians, `[min, max)` sampled at bin centers.
    pub azimuth_range: (f64, f64),
    /// Radians, endpoints inclusive.
    pub elevation_range: (f64, f64),
    pub max_range: f64,
}

impl Default for ScanPattern {
    fn default() -> Self {
        Self {
            azimuth_count: 360,
            elevation_count: 32,
            azimuth_range: (-std::f64::consts::PI, std::f64::consts::PI),
            elevation_range: ((-30.0f64).to_radians(), 10.0f64.to_radians()),
            max_range: 40.0,
        }
    }
}

impl ScanPattern {
    pub fn validate(&self) -> Result<(), String> {
        if self.azimuth_count == 0 || self.elevation_count == 0 {
            return Err("scan pattern counts must be >= 1".into());
        }
        if !(self.max_range > 0.0) {
            return Err("max_range must be positive".into());
        }
        Ok(())
    }

    /// Unit direction in the sensor frame for row `el`, column `az`.
    pub fn direction(&self, el: usize, az: usize) -> Vec3 {
        let (a0, a1) = self.azimuth_range;
        let a = a0 + (az as f64 + 0.5) * (a1 - a0) / self.azimuth_count as f64;
        let (e0, e1) = self.elevation_range;
        let e = if self.elevation_count == 1 {
            e0
        } else {
            e0 + el as f64 * (e1 - e0) / (self.elevation_count - 1) as f64
        };
        Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarRig {
    pub mount: Mount,
    pub pattern: ScanPattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            width: 96,
            height: 64,
            fx: 48.0,
            fy: 48.0,
            cx: 48.0,
            cy: 32.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub mount: Mount,
    pub intrinsics: Intrinsics,
}

/// Lidar and camera placement. The lidar sits above the camera by default
/// so its rays can pass over objects the camera cannot see past.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorRig {
    pub lidar: LidarRig,
    pub camera: CameraRig,
}

impl Default for SensorRig {
    fn default() -> Self {
        Self {
            lidar: LidarRig {
                mount: Mount {
                    translation: Vec3::new(0.0, 0.0, 2.05),
                    yaw: 0.0,
                },
                pattern: ScanPattern::default(),
            },
            camera: CameraRig {
                mount: Mount {
                    translation: Vec3::new(1.0, 0.0, 1.45),
                    yaw: 0.0,
                },
                intrinsics: Intrinsics::default(),
            },
        }
    }
}

impl SensorRig {
    pub fn validate(&self) -> Result<(), String> {
        self.lidar.pattern.validate()?;
        let i = &self.camera.intrinsics;
        if i.width == 0 || i.height == 0 || !(i.fx > 0.0) || !(i.fy > 0.0) {
            return Err("camera intrinsics must have positive size and focal length".into());
        }
        Ok(())
    }
}

/// One sweep. Rays are stored row-major: elevation row, then azimuth column.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    pub rows: usize,
    pub cols: usize,
    pub max_range: f64,
    pub rays: Vec<Ray>,
}

impl LidarScan {
    pub fn hits(&self) -> impl Iterator<Item = &Ray> {
        self.rays.iter().filter(|r| !r.miss)
    }

    pub fn hit_count(&self) -> usize {
        self.hits().count()
    }

    pub fn transformed(&self, pose: &Pose) -> LidarScan {
        LidarScan {
            rays: self.rays.iter().map(|r| r.transformed(pose)).collect(),
            ..*self
        }
    }

    pub fn rotated_about_z(&self, theta: f64) -> LidarScan {
        LidarScan {
            rays: self.rays.iter().map(|r| r.rotated_about_z(theta)).collect(),
            ..*self
        }
    }

    pub fn time_shifted(&self, dt: f64) -> LidarScan {
        LidarScan {
            rays: self
                .rays
                .iter()
                .map(|r| Ray {
                    time: r.time + dt,
                    ..*r
                })
                .collect(),
            ..*self
        }
    }
}

/// Casts every ray of `pattern` from `sensor_pose` at world time `t`.
pub fn cast_lidar_scan(scene: &Scene, sensor_pose: &Pose, pattern: &ScanPattern, t: f64) -> LidarScan {
    let origin = *sensor_pose.translation();
    let n = pattern.elevation_count * pattern.azimuth_count;
    let rays = par::map_indexed(n, |i| {
        let (el, az) = (i / pattern.azimuth_count, i % pattern.azimuth_count);
        let dir = sensor_pose.transform_vector(&pattern.direction(el, az));
        match scene.cast(&origin, &dir, t, pattern.max_range) {
            Some(h) => Ray {
                origin,
                endpoint: origin + dir * h.distance,
                direction: dir,
                miss: false,
                time: t,
            },
            None => Ray::missed(origin, dir, pattern.max_range, t),
        }
    });
    LidarScan {
        rows: pattern.elevation_count,
        cols: pattern.azimuth_count,
        max_range: pattern.max_range,
        rays,
    }
}

/// Prototype vector of a surface class, entries in `[-1, 1]`.
pub fn feature_prototype(proto: u16, dim: usize) -> Vec<f64> {
    let mut rng = RayRng::new(FEATURE_SEED, Domain::Scene, proto as u64);
    (0..dim).map(|_| rng.range(-1.0, 1.0)).collect()
}

struct FeatureBasis {
    freq: Vec<Vec3>,
    phase: Vec<f64>,
}

impl FeatureBasis {
    fn new(dim: usize) -> Self {
        let mut rng = RayRng::new(FEATURE_SEED, Domain::Scene, u64::MAX);
        let mut freq = Vec::with_capacity(dim);
        let mut phase = Vec::with_capacity(dim);
        for _ in 0..dim {
            let f = Vec3::new(
                rng.range(-MAX_SPATIAL_FREQ, MAX_SPATIAL_FREQ),
                rng.range(-MAX_SPATIAL_FREQ, MAX_SPATIAL_FREQ),
                rng.range(-MAX_SPATIAL_FREQ, MAX_SPATIAL_FREQ),
            );
            freq.push(f);
            phase.push(rng.range(0.0, std::f64::consts::TAU));
        }
        Self { freq, phase }
    }

    fn eval(&self, protos: &[Vec<f64>], proto: u16, point: Option<&Vec3>, out: &mut [f64]) {
        let base = &protos[proto as usize];
        for k in 0..out.len() {
            let pert = match point {
                Some(p) => FEATURE_PERTURBATION * (self.freq[k].dot(p) + self.phase[k]).sin(),
                None => 0.0,
            };
            out[k] = base[k] + pert;
        }
    }
}

/// Feature of a surface point: class prototype plus a smooth perturbation
/// of the world position (no perturbation for sky).
pub fn surface_feature(proto: u16, point: Option<&Vec3>, dim: usize) -> Vec<f64> {
    let basis = FeatureBasis::new(dim);
    let protos: Vec<Vec<f64>> = (0..=proto).map(|p| feature_prototype(p, dim)).collect();
    let mut out = vec![0.0; dim];
    basis.eval(&protos, proto, point, &mut out);
    out
}

fn proto_of(scene: &Scene, s: Surface) -> u16 {
    match s {
        Surface::Ground => PROTO_GROUND,
        Surface::Box(i) => 2 + scene.boxes[i].class_id as u16,
    }
}

/// Per-pixel procedural features and projective depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    /// Row-major `height x width x dim`.
    pub features: Vec<f64>,
    /// Projective (optical-axis) depth; infinite for sky.
    pub depth: Vec<f64>,
    /// Prototype index seen by each pixel.
    pub proto: Vec<u16>,
    /// World-from-camera (optical frame).
    pub camera_pose: Pose,
    pub intrinsics: Intrinsics,
    pub time: f64,
}

impl FeatureImage {
    pub fn feature(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.dim;
        &self.features[i..i + self.dim]
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    /// Same image with its pose expressed through `pose` (e.g. world to reference).
    pub fn reframed(&self, pose: &Pose, dt: f64) -> FeatureImage {
        FeatureImage {
            camera_pose: pose.compose(&self.camera_pose),
            time: self.time + dt,
            ..self.clone()
        }
    }
}

/// Optical-frame unit direction through the center of pixel `(u, v)`.
pub fn pixel_direction(intr: &Intrinsics, u: usize, v: usize) -> Vec3 {
    Vec3::new(
        (u as f64 + 0.5 - intr.cx) / intr.fx,
        (v as f64 + 0.5 - intr.cy) / intr.fy,
        1.0,
    )
    .normalize()
}

/// Pixel and projective depth of `p`, or `None` when behind the camera or
/// outside the image.
pub fn project_point(camera_pose: &Pose, intr: &Intrinsics, p: &Vec3) -> Option<(usize, usize, f64)> {
    let c = camera_pose.inverse().transform_point(p);
    if !(c.z > 1e-9) {
        return None;
    }
    let u = intr.fx * c.x / c.z + intr.cx;
    let v = intr.fy * c.y / c.z + intr.cy;
    if !(u >= 0.0 && v >= 0.0) {
        return None;
    }
    let (ui, vi) = (u.floor() as usize, v.floor() as usize);
    if ui >= intr.width || vi >= intr.height {
        return None;
    }
    Some((ui, vi, c.z))
}

pub fn render_feature_image(
    scene: &Scene,
    camera_pose: &Pose,
    intrinsics: &Intrinsics,
    t: f64,
    dim: usize,
) -> FeatureImage {
    assert!(dim >= 4, "feature dimension must be at least 4");
    let basis = FeatureBasis::new(dim);
    let max_proto = 2 + scene.boxes.iter().map(|b| b.class_id as usize).max().unwrap_or(0);
    let protos: Vec<Vec<f64>> = (0..=max_proto).map(|p| feature_prototype(p as u16, dim)).collect();
    let origin = *camera_pose.translation();
    let n = intrinsics.width * intrinsics.height;
    let px = par::map_indexed(n, |i| {
        let (u, v) = (i % intrinsics.width, i / intrinsics.width);
        let local = pixel_direction(intrinsics, u, v);
        let dir = camera_pose.transform_vector(&local);
        let mut feat = vec![0.0; dim];
        match scene.cast(&origin, &dir, t, f64::INFINITY) {
            Some(h) => {
                let proto = proto_of(scene, h.surface);
                let p = origin + dir * h.distance;
                basis.eval(&protos, proto, Some(&p), &mut feat);
                (feat, h.distance * local.z, proto)
            }
            None => {
                basis.eval(&protos, PROTO_SKY, None, &mut feat);
                (feat, f64::INFINITY, PROTO_SKY)
            }
        }
    });
    let mut features = Vec::with_capacity(n * dim);
    let mut depth = Vec::with_capacity(n);
    let mut proto = Vec::with_capacity(n);
    for (f, d, p) in px {
        features.extend_from_slice(&f);
        depth.push(d);
        proto.push(p);
    }
    FeatureImage {
        width: intrinsics.width,
        height: intrinsics.height,
        dim,
        features,
        depth,
        proto,
        camera_pose: *camera_pose,
        intrinsics: *intrinsics,
        time: t,
    }
}
