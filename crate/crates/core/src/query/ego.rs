use super::{Query, QueryError, SamplerConfig, SourceTag, Target};
use crate::geom::Vec3;
use crate::par;
use crate::rng::{Domain, RayRng};
use crate::scene::Scene;

/// Future ego translations over `[t0, t0 + t_max]` in the frame of the ego
/// at `t0`, as polyline vertices.
pub fn ego_path_in_reference(scene: &Scene, t0: f64, t_max: f64) -> Result<Vec<Vec3>, QueryError> {
    let end = scene.horizon().1;
    if end < t0 + t_max {
        return Err(QueryError::TrajectoryTooShort {
            end,
            needed: t0 + t_max,
        });
    }
    let to_ref = scene.ego_pose_at(t0)?.inverse();
    Ok(scene
        .ego_path(t0, t0 + t_max)?
        .iter()
        .map(|p| to_ref.transform_point(p))
        .collect())
}

/// Distance in the x-y plane from `p` to the polyline `path`.
pub fn distance_to_path_xy(p: &Vec3, path: &[Vec3]) -> f64 {
    let q = p.xy();
    if path.len() == 1 {
        return (q - path[0].xy()).norm();
    }
    let mut best = f64::INFINITY;
    for w in path.windows(2) {
        let (a, b) = (w[0].xy(), w[1].xy());
        let ab = b - a;
        let len2 = ab.norm_squared();
        let s = if len2 > 0.0 {
            ((q - a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        best = best.min((q - (a + ab * s)).norm());
    }
    best
}

fn point_at_arc(path: &[Vec3], cum: &[f64], s: f64) -> Vec3 {
    let i = cum.partition_point(|&c| c <= s).clamp(1, path.len().max(2) - 1);
    if path.len() == 1 {
        return path[0];
    }
    let seg = cum[i] - cum[i - 1];
    let f = if seg > 0.0 { ((s - cum[i - 1]) / seg).clamp(0.0, 1.0) } else { 0.0 };
    path[i - 1] + (path[i] - path[i - 1]) * f
}

/// Ego-path queries: positives inside the `w_ego` tube around the future
/// path (uniform in arc length, uniform in the disk), negatives uniform over
/// the region of interest and rejected until outside the tube. Query times
/// are uniform in `[0, t_max]` and do not affect labels.
pub fn gen_ego_path_queries(scene: &Scene, t0: f64, cfg: &SamplerConfig) -> Result<Vec<Query>, QueryError> {
    let roi = cfg.roi;
    let path = ego_path_in_reference(scene, t0, roi.t_max)?;
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + (w[1].xy() - w[0].xy()).norm());
    }
    let total = *cum.last().unwrap();
    let pos = par::map_indexed(cfg.n_ego_pos, |j| {
        let mut rng = RayRng::new(cfg.seed, Domain::EgoPositive, j as u64);
        let c = point_at_arc(&path, &cum, rng.uniform() * total);
        let r = cfg.w_ego * rng.uniform().sqrt();
        let phi = rng.uniform() * std::f64::consts::TAU;
        let z = rng.range(roi.z.0, roi.z.1);
        let t = rng.uniform() * roi.t_max;
        Query {
            position: Vec3::new(c.x + r * phi.cos(), c.y + r * phi.sin(), z),
            time: t,
            target: Target::Ego(1),
            tag: SourceTag::EgoPositive,
        }
    });
    let neg = par::map_indexed(cfg.n_ego_neg, |j| {
        let mut rng = RayRng::new(cfg.seed, Domain::EgoNegative, j as u64);
        for _ in 0..cfg.ego_rejection_cap {
            let p = Vec3::new(rng.range(roi.x.0, roi.x.1), rng.range(roi.y.0, roi.y.1), rng.range(roi.z.0, roi.z.1));
            let t = rng.uniform() * roi.t_max;
            if distance_to_path_xy(&p, &path) > cfg.w_ego {
                return Ok(Query {
                    position: p,
                    time: t,
                    target: Target::Ego(0),
                    tag: SourceTag::EgoNegative,
                });
            }
        }
        Err(QueryError::RejectionCap(cfg.ego_rejection_cap))
    });
    let mut out = pos;
    for q in neg {
        out.push(q?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, Bounds, EgoKeyframe, SceneKnobs, SensorRig};

    fn straight_scene() -> Scene {
        let track = (0..=10)
            .map(|i| EgoKeyframe {
                t: i as f64 * 0.5,
                position: Vec3::new(i as f64 * 2.5, 0.0, 0.0),
                yaw: 0.0,
            })
            .collect();
        let bounds = Bounds {
            min: Vec3::new(-50.0, -50.0, -5.0),
            max: Vec3::new(50.0, 50.0, 10.0),
        };
        Scene::new(0.0, vec![], track, bounds, SensorRig::default()).unwrap()
    }

    #[test]
    fn tube_examples() {
        let path = vec![Vec3::zeros(), Vec3::new(10.0, 0.0, 0.0)];
        assert_eq!(distance_to_path_xy(&Vec3::new(4.0, 0.0, 3.0), &path), 0.0);
        assert_eq!(distance_to_path_xy(&Vec3::new(4.0, 1.5, 0.0), &path), 1.5);
        assert_eq!(distance_to_path_xy(&Vec3::new(13.0, 4.0, 0.0), &path), 5.0);
    }

    #[test]
    fn labels_follow_the_tube() {
        let s = straight_scene();
        let cfg = SamplerConfig::default();
        let q = gen_ego_path_queries(&s, 1.0, &cfg).unwrap();
        assert_eq!(q.len(), cfg.n_ego_pos + cfg.n_ego_neg);
        for x in &q {
            assert!(x.time >= 0.0 && x.time <= cfg.roi.t_max);
            let inside = x.position.y.abs() <= 1.0 && x.position.x >= -1.0 && x.position.x <= 16.0;
            match x.target {
                Target::Ego(1) => assert!(x.position.y.abs() <= 1.0 + 1e-9 && x.position.x > -1.0 - 1e-9),
                Target::Ego(0) => assert!(!inside || distance_to_path_xy(&x.position, &[Vec3::zeros(), Vec3::new(15.0, 0.0, 0.0)]) > 1.0),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn short_trajectory_is_an_error() {
        let s = straight_scene();
        assert!(matches!(
            gen_ego_path_queries(&s, 3.0, &SamplerConfig::default()),
            Err(QueryError::TrajectoryTooShort { .. })
        ));
    }

    #[test]
    fn rejection_cap() {
        let s = straight_scene();
        let mut cfg = SamplerConfig::default();
        cfg.w_ego = 100.0;
        assert_eq!(gen_ego_path_queries(&s, 1.0, &cfg), Err(QueryError::RejectionCap(100)));
    }

    #[test]
    fn curved_positives_stay_in_tube() {
        let knobs = SceneKnobs {
            max_yaw_rate: 0.3,
            ..SceneKnobs::default()
        };
        let s = generate_scene(5, 1, &knobs);
        let cfg = SamplerConfig {
            n_ego_pos: 2000,
            n_ego_neg: 0,
            ..SamplerConfig::default()
        };
        let path = ego_path_in_reference(&s, 1.0, 3.0).unwrap();
        // Densely resampled polyline as an independent distance oracle.
        let mut dense = Vec::new();
        for w in path.windows(2) {
            for k in 0..200 {
                dense.push(w[0] + (w[1] - w[0]) * (k as f64 / 200.0));
            }
        }
        dense.push(*path.last().unwrap());
        for q in gen_ego_path_queries(&s, 1.0, &cfg).unwrap() {
            let d = dense.iter().map(|p| (p.xy() - q.position.xy()).norm()).fold(f64::INFINITY, f64::min);
            assert!(d <= cfg.w_ego + 0.02);
            assert!(distance_to_path_xy(&q.position, &path) <= cfg.w_ego + 1e-9);
        }
    }
}
