use super::{Query, QueryError, SamplerConfig, SourceTag};
use crate::geom::Ray;
use crate::par;
use crate::rng::{Domain, RayRng};
use crate::scene::LidarScan;

/// Stream index of ray (or query) `j` of scan `scan_id`.
pub(crate) fn stream(scan_id: u64, j: u64) -> u64 {
    (scan_id << 40) | j
}

fn hit_rays(scan: &LidarScan) -> Result<Vec<(usize, &Ray)>, QueryError> {
    let hits: Vec<(usize, &Ray)> = scan.rays.iter().enumerate().filter(|(_, r)| !r.miss).collect();
    if hits.is_empty() {
        return Err(QueryError::EmptyScan);
    }
    Ok(hits)
}

/// Free-space queries along hit rays: `s + d^tau (p - s)`, label 0.
pub fn gen_occupancy_negatives(
    scan: &LidarScan,
    cfg: &SamplerConfig,
    count: usize,
) -> Result<Vec<Query>, QueryError> {
    negatives_for_scan(scan, cfg, count, 0)
}

pub(crate) fn negatives_for_scan(
    scan: &LidarScan,
    cfg: &SamplerConfig,
    count: usize,
    scan_id: u64,
) -> Result<Vec<Query>, QueryError> {
    let hits = hit_rays(scan)?;
    let tau = cfg.jitter_tau;
    Ok(par::map_indexed(count, |j| {
        let ray = hits[j % hits.len()].1;
        let mut rng = RayRng::new(cfg.seed, Domain::OccNegative, stream(scan_id, j as u64));
        let f = loop {
            let f = rng.uniform().powf(tau);
            if f > 0.0 && f < 1.0 {
                break f;
            }
        };
        let pos = ray.origin + (ray.endpoint - ray.origin) * f;
        Query::occupancy(pos, ray.time, 0, SourceTag::RayNegative)
    }))
}

/// Occupied queries in the `(0, delta)` buffer behind each return, label 1.
pub fn gen_occupancy_positives(
    scan: &LidarScan,
    cfg: &SamplerConfig,
    count: usize,
) -> Result<Vec<Query>, QueryError> {
    positives_for_scan(scan, cfg, count, 0)
}

pub(crate) fn positives_for_scan(
    scan: &LidarScan,
    cfg: &SamplerConfig,
    count: usize,
    scan_id: u64,
) -> Result<Vec<Query>, QueryError> {
    let hits = hit_rays(scan)?;
    Ok(par::map_indexed(count, |j| {
        let ray = hits[j % hits.len()].1;
        let mut rng = RayRng::new(cfg.seed, Domain::OccPositive, stream(scan_id, j as u64));
        let r = cfg.delta * rng.uniform_open();
        Query::occupancy(ray.endpoint + ray.direction * r, ray.time, 1, SourceTag::RayPositive)
    }))
}

/// A run of consecutive missing rays within one elevation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MissRegion {
    pub row: usize,
    pub start: usize,
    pub len: usize,
}

/// Runs of at least `min_run` consecutive misses per row. Runs do not wrap
/// around the azimuth seam.
pub fn missing_ray_regions(scan: &LidarScan, min_run: usize) -> Vec<MissRegion> {
    let mut out = Vec::new();
    for row in 0..scan.rows {
        let rays = &scan.rays[row * scan.cols..(row + 1) * scan.cols];
        let mut c = 0;
        while c < rays.len() {
            if !rays[c].miss {
                c += 1;
                continue;
            }
            let start = c;
            while c < rays.len() && rays[c].miss {
                c += 1;
            }
            if c - start >= min_run {
                out.push(MissRegion {
                    row,
                    start,
                    len: c - start,
                });
            }
        }
    }
    out
}

/// Free-space queries along extended regions of missing returns, label 0.
/// Samples lie at `s + u * L * dir` with `u ~ U(0.05, 0.95)` and `L` the
/// ray length (the scan's max range unless clipped).
pub fn gen_missing_ray_negatives(scan: &LidarScan, cfg: &SamplerConfig) -> Vec<Query> {
    missing_for_scan(scan, cfg, 0)
}

pub(crate) fn missing_for_scan(scan: &LidarScan, cfg: &SamplerConfig, scan_id: u64) -> Vec<Query> {
    let rays: Vec<usize> = missing_ray_regions(scan, cfg.missing_ray_min_run)
        .iter()
        .flat_map(|r| (r.start..r.start + r.len).map(move |c| r.row * scan.cols + c))
        .collect();
    let per = cfg.missing_ray_samples_per_ray;
    par::map_indexed(rays.len(), |i| {
        let ray = &scan.rays[rays[i]];
        let mut rng = RayRng::new(cfg.seed, Domain::MissingRay, stream(scan_id, rays[i] as u64));
        let len = ray.length();
        (0..per)
            .map(|_| {
                let u = rng.range(0.05, 0.95);
                Query::occupancy(ray.origin + ray.direction * (u * len), ray.time, 0, SourceTag::MissingRay)
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::query::Target;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one_ray_scan(p: Vec3) -> LidarScan {
        LidarScan {
            rows: 1,
            cols: 1,
            max_range: 40.0,
            rays: vec![Ray::hit(Vec3::zeros(), p, 0.5)],
        }
    }

    #[test]
    fn negatives_lie_on_the_segment() {
        let scan = one_ray_scan(Vec3::new(10.0, 0.0, 0.0));
        let cfg = SamplerConfig::default();
        let q = gen_occupancy_negatives(&scan, &cfg, 200).unwrap();
        assert_eq!(q.len(), 200);
        for x in &q {
            assert_eq!(x.target, Target::Occupancy(0));
            assert_eq!(x.time, 0.5);
            assert!(x.position.x > 0.0 && x.position.x < 10.0);
            assert_eq!((x.position.y, x.position.z), (0.0, 0.0));
        }
        let mut rng = RayRng::new(cfg.seed, Domain::OccNegative, 0);
        assert_abs_diff_eq!(q[0].position.x, 10.0 * rng.uniform(), epsilon = 1e-12);
    }

    #[test]
    fn jitter_pushes_toward_the_sensor() {
        let scan = one_ray_scan(Vec3::new(10.0, 0.0, 0.0));
        let mean = |tau: f64| {
            let cfg = SamplerConfig {
                jitter_tau: tau,
                ..SamplerConfig::default()
            };
            let q = gen_occupancy_negatives(&scan, &cfg, 4000).unwrap();
            q.iter().map(|x| x.position.x).sum::<f64>() / q.len() as f64
        };
        // E[d^tau] = 1 / (1 + tau)
        assert!((mean(1.0) - 5.0).abs() < 0.2);
        assert!((mean(3.0) - 2.5).abs() < 0.2);
    }

    #[test]
    fn positives_extend_past_the_return() {
        let scan = one_ray_scan(Vec3::new(10.0, 0.0, 0.0));
        let cfg = SamplerConfig::default();
        let q = gen_occupancy_positives(&scan, &cfg, 100).unwrap();
        for x in &q {
            assert_eq!(x.target, Target::Occupancy(1));
            assert!(x.position.x > 10.0 && x.position.x < 10.1);
        }
    }

    #[test]
    fn empty_scan_is_an_error() {
        let scan = LidarScan {
            rows: 1,
            cols: 1,
            max_range: 40.0,
            rays: vec![Ray::missed(Vec3::zeros(), Vec3::x(), 40.0, 0.0)],
        };
        let cfg = SamplerConfig::default();
        assert_eq!(gen_occupancy_negatives(&scan, &cfg, 1), Err(QueryError::EmptyScan));
        assert_eq!(gen_occupancy_positives(&scan, &cfg, 1), Err(QueryError::EmptyScan));
    }

    fn row_scan(miss: impl Fn(usize) -> bool, cols: usize) -> LidarScan {
        let rays = (0..cols)
            .map(|c| {
                let a = c as f64 * 0.01;
                let d = Vec3::new(a.cos(), a.sin(), 0.0);
                if miss(c) {
                    Ray::missed(Vec3::zeros(), d, 40.0, 0.0)
                } else {
                    Ray::hit(Vec3::zeros(), d * 5.0, 0.0)
                }
            })
            .collect();
        LidarScan {
            rows: 1,
            cols,
            max_range: 40.0,
            rays,
        }
    }

    #[test]
    fn missing_regions() {
        let scan = row_scan(|c| (10..=30).contains(&c), 50);
        assert_eq!(
            missing_ray_regions(&scan, 5),
            vec![MissRegion {
                row: 0,
                start: 10,
                len: 21
            }]
        );
        let isolated = row_scan(|c| c == 7, 50);
        assert!(missing_ray_regions(&isolated, 5).is_empty());
        assert!(gen_missing_ray_negatives(&isolated, &SamplerConfig::default()).is_empty());
        let cfg = SamplerConfig::default();
        let q = gen_missing_ray_negatives(&scan, &cfg);
        assert_eq!(q.len(), 21 * cfg.missing_ray_samples_per_ray);
        for x in &q {
            let r = x.position.norm();
            assert!(r >= 0.05 * 40.0 - 1e-9 && r <= 0.95 * 40.0 + 1e-9);
        }
    }

    proptest! {
        #[test]
        fn negatives_are_strictly_inside(px in 0.5f64..30.0, py in -5.0f64..5.0, tau in 0.2f64..4.0, seed in 0u64..1000) {
            let scan = one_ray_scan(Vec3::new(px, py, 0.3));
            let cfg = SamplerConfig { jitter_tau: tau, seed, ..SamplerConfig::default() };
            let p = scan.rays[0].endpoint;
            for q in gen_occupancy_negatives(&scan, &cfg, 20).unwrap() {
                let f = q.position.dot(&p) / p.norm_squared();
                prop_assert!(f > 0.0 && f < 1.0);
            }
        }

        #[test]
        fn generation_is_order_free(seed in 0u64..1000) {
            let scan = row_scan(|c| c % 3 == 0, 60);
            let cfg = SamplerConfig { seed, ..SamplerConfig::default() };
            let a = gen_occupancy_negatives(&scan, &cfg, 50).unwrap();
            let b = par::with_workers(1, || gen_occupancy_negatives(&scan, &cfg, 50).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
