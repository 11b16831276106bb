//! Browser bindings. Every function returns flat numeric arrays that the
//! page draws on a canvas; coordinates are meters in the ego frame at the
//! reference time (x forward, y left).

use occ4d::eval::{average_precision, recall_at_precision, threshold_sweep};
use occ4d::geom::rotate_about_z;
use occ4d::query::{distance_to_path_xy, ego_path_in_reference, gen_occupancy_negatives, gen_occupancy_positives, SamplerConfig};
use occ4d::rng::{Domain, RayRng};
use occ4d::scene::{cast_lidar_scan, generate_scene, LidarScan, Scene, SceneKnobs};
use wasm_bindgen::prelude::*;

const T0: f64 = 1.0;
const T_MAX: f64 = 3.0;

fn scene(seed: u32, index: u32) -> Scene {
    let mut s = generate_scene(seed as u64, index as u64, &SceneKnobs::default());
    // A sparser sweep keeps the page responsive.
    s.sensors.lidar.pattern.azimuth_count = 180;
    s.sensors.lidar.pattern.elevation_count = 16;
    s
}

fn reference_scan(s: &Scene) -> Option<LidarScan> {
    let to_ref = s.ego_pose_at(T0).ok()?.inverse();
    let pose = s.lidar_pose_at(T0).ok()?;
    Some(cast_lidar_scan(s, &pose, &s.sensors.lidar.pattern, T0).transformed(&to_ref).time_shifted(-T0))
}

/// Box footprints at the reference time: 4 corners (x, y) per box.
#[wasm_bindgen]
pub fn box_corners(seed: u32, index: u32) -> Vec<f64> {
    let s = scene(seed, index);
    let Ok(pose) = s.ego_pose_at(T0) else { return Vec::new() };
    let to_ref = pose.inverse();
    let mut out = Vec::new();
    for b in &s.boxes {
        let c = b.center_at(T0);
        let (sin, cos) = b.yaw.sin_cos();
        let (hx, hy) = (b.half_extents.x, b.half_extents.y);
        for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)] {
            let w = occ4d::Vec3::new(c.x + cos * sx * hx - sin * sy * hy, c.y + sin * sx * hx + cos * sy * hy, c.z);
            let p = to_ref.transform_point(&w);
            out.extend([p.x, p.y]);
        }
    }
    out
}

/// Lidar returns of the reference sweep as (x, y) pairs.
#[wasm_bindgen]
pub fn lidar_hits(seed: u32, index: u32) -> Vec<f64> {
    let s = scene(seed, index);
    reference_scan(&s)
        .map(|scan| scan.hits().flat_map(|r| [r.endpoint.x, r.endpoint.y]).collect())
        .unwrap_or_default()
}

/// Occupancy queries from the reference sweep as (x, y, label) triples:
/// negatives along each beam with jitter exponent `tau`, positives within
/// `delta` behind each return, all rotated by `theta_deg` about z.
#[wasm_bindgen]
pub fn occupancy_queries(seed: u32, index: u32, delta: f64, tau: f64, theta_deg: f64, count: u32) -> Vec<f64> {
    let s = scene(seed, index);
    let Some(scan) = reference_scan(&s) else { return Vec::new() };
    let cfg = SamplerConfig {
        delta: delta.max(1e-3),
        jitter_tau: tau.max(1e-3),
        seed: seed as u64,
        ..SamplerConfig::default()
    };
    let n = count as usize;
    let mut qs = gen_occupancy_negatives(&scan, &cfg, n).unwrap_or_default();
    qs.extend(gen_occupancy_positives(&scan, &cfg, n).unwrap_or_default());
    let theta = theta_deg.to_radians();
    qs.iter()
        .flat_map(|q| {
            let p = rotate_about_z(&q.position, theta);
            let label = match q.target {
                occ4d::query::Target::Occupancy(l) => l as f64,
                _ => -1.0,
            };
            [p.x, p.y, label]
        })
        .collect()
}

/// Ego-path tube labels on a `size x size` lattice with spacing `step`,
/// row 0 at the largest x and column 0 at the largest y. Values are 0 or 1.
#[wasm_bindgen]
pub fn ego_tube(seed: u32, index: u32, w_ego: f64, size: u32, step: f64) -> Vec<u8> {
    let s = scene(seed, index);
    let Ok(path) = ego_path_in_reference(&s, T0, T_MAX) else { return Vec::new() };
    let n = size as usize;
    let half = n as f64 * step / 2.0;
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let p = occ4d::Vec3::new(half - (row as f64 + 0.5) * step, half - (col as f64 + 0.5) * step, 0.0);
            out.push(u8::from(distance_to_path_xy(&p, &path) <= w_ego));
        }
    }
    out
}

/// Synthetic ranking problem: `n` items with positive rate `base_rate`;
/// scores are Gaussian-ish with means `0` and `separation`, squashed to
/// `[0, 1]`. Returns `[ap, recall_at_target, threshold, r0, p0, r1, p1, ...]`.
#[wasm_bindgen]
pub fn pr_curve(seed: u32, n: u32, base_rate: f64, separation: f64, target: f64) -> Vec<f64> {
    let mut rng = RayRng::new(seed as u64, Domain::Generic, 0);
    let n = n.max(2) as usize;
    let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < base_rate).collect();
    labels[0] = true;
    labels[1] = false;
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| {
            // Sum of uniforms approximates a unit normal.
            let z: f64 = (0..12).map(|_| rng.uniform()).sum::<f64>() - 6.0;
            let x = z + if l { separation } else { 0.0 };
            1.0 / (1.0 + (-x).exp())
        })
        .collect();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let (Ok(ap), Ok((r, thr)), Ok(sweep)) = (
        average_precision(&scores, &labels),
        recall_at_precision(&scores, &labels, target),
        threshold_sweep(&scores, &labels),
    ) else {
        return Vec::new();
    };
    let mut out = vec![ap, r, if thr.is_finite() { thr } else { -1.0 }];
    for p in sweep {
        out.push(p.tp as f64 / pos);
        out.push(p.tp as f64 / (p.tp + p.fp) as f64);
    }
    out
}
