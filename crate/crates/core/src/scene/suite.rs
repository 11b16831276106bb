use super::{Bounds, EgoKeyframe, Scene, SceneBox, SensorRig};
use crate::geom::{rotate_about_z, Vec3};
use crate::rng::{Domain, RayRng};
use serde::{Deserialize, Serialize};

/// Difficulty knobs for procedurally generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneKnobs {
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Probability that a box moves.
    pub dynamic_fraction: f64,
    pub max_speed: f64,
    pub ego_speed: f64,
    pub max_yaw_rate: f64,
    /// Track length in seconds, starting at 0.
    pub horizon: f64,
    pub keyframe_dt: f64,
    /// Boxes are placed within this half-width around the ego at `reference_time`.
    pub extent: f64,
    /// Fraction of boxes placed in front of the camera to create occlusion.
    pub front_bias: f64,
    pub reference_time: f64,
    pub ground_z: f64,
}

impl Default for SceneKnobs {
    fn default() -> Self {
        Self {
            min_boxes: 3,
            max_boxes: 8,
            dynamic_fraction: 0.5,
            max_speed: 6.0,
            ego_speed: 5.0,
            max_yaw_rate: 0.15,
            horizon: 5.0,
            keyframe_dt: 0.5,
            extent: 15.0,
            front_bias: 0.3,
            reference_time: 1.0,
            ground_z: 0.0,
        }
    }
}

const CORRIDOR_CLEARANCE: f64 = 2.0;
const PLACEMENT_ATTEMPTS: usize = 200;

/// Half extents per class: car, truck, pedestrian, static block.
const CLASS_SHAPES: [[f64; 3]; 4] = [
    [2.25, 1.0, 0.8],
    [4.0, 1.25, 1.5],
    [0.4, 0.4, 0.9],
    [2.5, 2.5, 2.0],
];

fn ego_track(rng: &mut RayRng, k: &SceneKnobs) -> Vec<EgoKeyframe> {
    let omega = rng.range(-k.max_yaw_rate, k.max_yaw_rate);
    let v = k.ego_speed;
    let n = (k.horizon / k.keyframe_dt).ceil() as usize;
    (0..=n)
        .map(|i| {
            let t = (i as f64 * k.keyframe_dt).min(k.horizon);
            let (x, y) = if omega.abs() < 1e-9 {
                (v * t, 0.0)
            } else {
                let a = omega * t;
                (v / omega * a.sin(), v / omega * (1.0 - a.cos()))
            };
            EgoKeyframe {
                t,
                position: Vec3::new(x, y, k.ground_z),
                yaw: omega * t,
            }
        })
        .collect()
}

fn distance_to_polyline_xy(p: &Vec3, path: &[Vec3]) -> f64 {
    if path.len() == 1 {
        return (p.xy() - path[0].xy()).norm();
    }
    path.windows(2)
        .map(|w| {
            let (a, b) = (w[0].xy(), w[1].xy());
            let ab = b - a;
            let len2 = ab.norm_squared();
            let s = if len2 > 0.0 {
                ((p.xy() - a).dot(&ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (p.xy() - (a + ab * s)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Deterministic procedural scene number `index` of the suite seeded by `seed`.
pub fn generate_scene(seed: u64, index: u64, knobs: &SceneKnobs) -> Scene {
    let mut rng = RayRng::new(seed, Domain::Scene, index);
    let track = ego_track(&mut rng, knobs);
    let path: Vec<Vec3> = track.iter().map(|k| k.position).collect();
    let reach = knobs.ego_speed * knobs.horizon + knobs.extent + 10.0;
    let bounds = Bounds {
        min: Vec3::new(-reach, -reach, knobs.ground_z - 5.0),
        max: Vec3::new(reach, reach, knobs.ground_z + 10.0),
    };
    let ref_pose = {
        let k = knobs.reference_time;
        let seg = track.partition_point(|f| f.t <= k).clamp(1, track.len() - 1);
        let (a, b) = (&track[seg - 1], &track[seg]);
        let f = ((k - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        (a.position + (b.position - a.position) * f, a.yaw + (b.yaw - a.yaw) * f)
    };
    let span = knobs.max_boxes.saturating_sub(knobs.min_boxes) as u64 + 1;
    let n_boxes = knobs.min_boxes + rng.below(span) as usize;
    let mut boxes = Vec::with_capacity(n_boxes);
    let times: Vec<f64> = (0..=(knobs.horizon * 10.0).round() as usize)
        .map(|i| i as f64 * 0.1)
        .collect();
    for _ in 0..n_boxes {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class_id = rng.below(CLASS_SHAPES.len() as u64) as u8;
            let he = Vec3::from(CLASS_SHAPES[class_id as usize]);
            let local = if rng.uniform() < knobs.front_bias {
                let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                Vec3::new(rng.range(5.0, 14.0), side * rng.range(3.0, 8.0), 0.0)
            } else {
                Vec3::new(
                    rng.range(-knobs.extent, knobs.extent),
                    rng.range(-knobs.extent, knobs.extent),
                    0.0,
                )
            };
            let world_ref = rotate_about_z(&local, ref_pose.1) + ref_pose.0;
            let quarter = rng.below(4) as f64 * std::f64::consts::FRAC_PI_2;
            let yaw = quarter + rng.range(-0.15, 0.15);
            let moving = class_id != 3 && rng.uniform() < knobs.dynamic_fraction;
            let speed = if moving {
                let top = if class_id == 2 { 1.5 } else { knobs.max_speed };
                rng.range(0.5, top.max(0.5))
            } else {
                0.0
            };
            let velocity = Vec3::new(yaw.cos(), yaw.sin(), 0.0) * speed;
            let center_ref = Vec3::new(world_ref.x, world_ref.y, knobs.ground_z + he.z);
            let candidate = SceneBox {
                center: center_ref - velocity * knobs.reference_time,
                yaw,
                half_extents: he,
                velocity,
                class_id,
            };
            let clear = times.iter().all(|&t| {
                let c = candidate.center_at(t);
                bounds.contains(&c)
                    && distance_to_polyline_xy(&c, &path)
                        > candidate.footprint_radius() + CORRIDOR_CLEARANCE
            });
            if clear {
                boxes.push(candidate);
                break;
            }
        }
    }
    Scene::new(knobs.ground_z, boxes, track, bounds, SensorRig::default())
        .expect("generated scene is valid")
}
