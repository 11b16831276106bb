//! Ground-truth world: a ground plane, constant-velocity yawed boxes and a
//! piecewise-linear ego track. Everything here is analytically
//! intersectable, so it doubles as the oracle for every label.

mod sensors;
mod suite;

pub use sensors::{
    cast_lidar_scan, feature_prototype, pixel_direction, project_point, render_feature_image,
    surface_feature, CameraRig, FeatureImage, Intrinsics, LidarRig, LidarScan, Mount, ScanPattern,
    SensorRig, FEATURE_PERTURBATION, PROTO_GROUND, PROTO_SKY,
};
pub use suite::{generate_scene, SceneKnobs};

use crate::geom::{Pose, Vec3};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SceneError {
    #[error("time {t} outside simulated horizon [{start}, {end}]")]
    OutOfHorizon { t: f64, start: f64, end: f64 },
    #[error("invalid scene: {0}")]
    Invalid(String),
}

/// A box of constant yaw translating with constant velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBox {
    /// Center at world time 0.
    pub center: Vec3,
    pub yaw: f64,
    pub half_extents: Vec3,
    pub velocity: Vec3,
    pub class_id: u8,
}

impl SceneBox {
    pub fn center_at(&self, t: f64) -> Vec3 {
        self.center + self.velocity * t
    }

    fn to_local(&self, p: &Vec3, t: f64) -> Vec3 {
        let d = p - self.center_at(t);
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn dir_to_local(&self, v: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z)
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Vec3, t: f64) -> bool {
        let l = self.to_local(p, t);
        l.x.abs() <= self.half_extents.x
            && l.y.abs() <= self.half_extents.y
            && l.z.abs() <= self.half_extents.z
    }

    /// Slab test: parametric `(enter, exit)` of the line `origin + s * dir`
    /// through the box at time `t`, if it intersects.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3, t: f64) -> Option<(f64, f64)> {
        let o = self.to_local(origin, t);
        let d = self.dir_to_local(dir);
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for k in 0..3 {
            let h = self.half_extents[k];
            if d[k] == 0.0 {
                if o[k].abs() > h {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[k];
            let (a, b) = ((-h - o[k]) * inv, (h - o[k]) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            lo = lo.max(a);
            hi = hi.min(b);
            if lo > hi {
                return None;
            }
        }
        Some((lo, hi))
    }

    /// Bounding radius of the footprint in the x-y plane.
    pub fn footprint_radius(&self) -> f64 {
        self.half_extents.x.hypot(self.half_extents.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoKeyframe {
    pub t: f64,
    pub position: Vec3,
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// The same box scaled by `factor` about its center.
    pub fn scaled(&self, factor: f64) -> Bounds {
        let c = (self.min + self.max) * 0.5;
        let h = (self.max - self.min) * 0.5 * factor;
        Bounds {
            min: c - h,
            max: c + h,
        }
    }
}

/// What a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Box(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub surface: Surface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub ground_z: f64,
    pub boxes: Vec<SceneBox>,
    pub ego_track: Vec<EgoKeyframe>,
    pub bounds: Bounds,
    #[serde(default)]
    pub sensors: SensorRig,
}

impl Scene {
    pub fn new(
        ground_z: f64,
        boxes: Vec<SceneBox>,
        ego_track: Vec<EgoKeyframe>,
        bounds: Bounds,
        sensors: SensorRig,
    ) -> Result<Self, SceneError> {
        let s = Self {
            ground_z,
            boxes,
            ego_track,
            bounds,
            sensors,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let s: Scene = serde_json::from_str(text).map_err(|e| {
            SceneError::Invalid(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    /// Content digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        crate::format::sha256_hex(serde_json::to_string(self).expect("scene serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        if !self.ground_z.is_finite() {
            return bad("ground_z must be finite".into());
        }
        if self.ego_track.is_empty() {
            return bad("ego_track is empty".into());
        }
        if self.ego_track.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return bad("ego_track timestamps must be strictly increasing".into());
        }
        if (0..3).any(|k| !(self.bounds.min[k] < self.bounds.max[k])) {
            return bad("bounds min must be below max".into());
        }
        let (t0, t1) = self.horizon();
        let outer = self.bounds.scaled(2.0);
        for (i, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|k| !(b.half_extents[k] > 0.0)) {
                return bad(format!("box {i}: half-extents must be positive"));
            }
            if !b.yaw.is_finite() || b.center.iter().chain(b.velocity.iter()).any(|v| !v.is_finite()) {
                return bad(format!("box {i}: non-finite field"));
            }
            // Linear motion: extremes are reached at the horizon ends.
            for t in [t0, t1] {
                if !outer.contains(&b.center_at(t)) {
                    return bad(format!("box {i} leaves 2x bounds at t={t}"));
                }
            }
        }
        self.sensors.validate().map_err(SceneError::Invalid)
    }

    pub fn horizon(&self) -> (f64, f64) {
        (
            self.ego_track.first().map_or(0.0, |k| k.t),
            self.ego_track.last().map_or(0.0, |k| k.t),
        )
    }

    fn check_time(&self, t: f64) -> Result<(), SceneError> {
        let (start, end) = self.horizon();
        if t < start || t > end || !t.is_finite() {
            return Err(SceneError::OutOfHorizon { t, start, end });
        }
        Ok(())
    }

    /// True iff `q` lies inside any (advected) box or at/below the ground.
    pub fn occupancy_oracle(&self, q: &Vec3, t: f64) -> Result<bool, SceneError> {
        self.check_time(t)?;
        Ok(self.occupied_unchecked(q, t))
    }

    pub(crate) fn occupied_unchecked(&self, q: &Vec3, t: f64) -> bool {
        q.z <= self.ground_z || self.boxes.iter().any(|b| b.contains(q, t))
    }

    /// Nearest intersection along `origin + s * dir`, `0 < s <= max_range`.
    /// Boxes that already contain the origin are ignored.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, t: f64, max_range: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir.z < 0.0 && origin.z > self.ground_z {
            let s = (self.ground_z - origin.z) / dir.z;
            if s > 0.0 && s <= max_range {
                best = Some(Hit {
                    distance: s,
                    surface: Surface::Ground,
                });
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some((enter, _)) = b.ray_interval(origin, dir, t) {
                if enter > 0.0 && enter <= max_range && best.is_none_or(|h| enter < h.distance) {
                    best = Some(Hit {
                        distance: enter,
                        surface: Surface::Box(i),
                    });
                }
            }
        }
        best
    }

    /// Depth of solid material directly behind a hit, measured along the ray.
    pub fn solid_depth_behind(&self, origin: &Vec3, dir: &Vec3, t: f64, hit: &Hit) -> f64 {
        match hit.surface {
            Surface::Ground => f64::INFINITY,
            Surface::Box(i) => self.boxes[i]
                .ray_interval(origin, dir, t)
                .map_or(0.0, |(a, b)| b - a),
        }
    }

    pub fn ego_pose_at(&self, t: f64) -> Result<Pose, SceneError> {
        self.check_time(t)?;
        let track = &self.ego_track;
        let seg = track.partition_point(|k| k.t <= t);
        if seg == 0 {
            return Ok(keyframe_pose(&track[0]));
        }
        if seg == track.len() {
            return Ok(keyframe_pose(&track[seg - 1]));
        }
        let (a, b) = (&track[seg - 1], &track[seg]);
        if t == a.t {
            return Ok(keyframe_pose(a));
        }
        let f = (t - a.t) / (b.t - a.t);
        let pos = a.position + (b.position - a.position) * f;
        let dyaw = wrap_angle(b.yaw - a.yaw);
        Ok(Pose::from_yaw(a.yaw + dyaw * f, pos))
    }

    /// Ego translations over `[t_start, t_end]`: the track keyframes inside
    /// the window plus interpolated endpoints. Consecutive points form the
    /// exact driven path.
    pub fn ego_path(&self, t_start: f64, t_end: f64) -> Result<Vec<Vec3>, SceneError> {
        self.check_time(t_start)?;
        self.check_time(t_end)?;
        let mut pts = vec![*self.ego_pose_at(t_start)?.translation()];
        for k in &self.ego_track {
            if k.t > t_start && k.t < t_end {
                pts.push(k.position);
            }
        }
        pts.push(*self.ego_pose_at(t_end)?.translation());
        Ok(pts)
    }

    pub fn lidar_pose_at(&self, t: f64) -> Result<Pose, SceneError> {
        Ok(self.ego_pose_at(t)?.compose(&self.sensors.lidar.mount.pose()))
    }

    pub fn camera_pose_at(&self, t: f64) -> Result<Pose, SceneError> {
        Ok(self.ego_pose_at(t)?.compose(&self.sensors.camera.mount.camera_pose()))
    }
}

fn keyframe_pose(k: &EgoKeyframe) -> Pose {
    Pose::from_yaw(k.yaw, k.position)
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r < -std::f64::consts::PI {
        r += two_pi;
    }
    r
}
