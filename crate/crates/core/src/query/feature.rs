use super::occupancy::stream;
use super::{Query, QueryError, SamplerConfig, SourceTag, Target};
use crate::pca::{PcaError, PcaModel};
use crate::par;
use crate::rng::{choose_sorted, Domain, RayRng};
use crate::scene::{project_point, render_feature_image, FeatureImage, LidarScan, Scene};
use std::collections::HashMap;
use std::sync::Arc;

/// A lidar return that survived the per-pixel minimum-depth filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisiblePoint {
    pub scan: usize,
    pub ray: usize,
    pub image: usize,
    pub u: usize,
    pub v: usize,
    pub depth: f64,
}

/// Index of the image closest in time; ties go to the earlier image.
fn closest_image(images: &[FeatureImage], t: f64) -> usize {
    let mut best = 0;
    for (i, img) in images.iter().enumerate() {
        let d = (img.time - t).abs();
        let b = (images[best].time - t).abs();
        if d < b || (d == b && img.time < images[best].time) {
            best = i;
        }
    }
    best
}

/// Projects every hit into its closest-in-time image and keeps the points
/// within `depth_tol` of the nearest projected point in the same pixel.
pub fn visible_points(
    scans: &[LidarScan],
    images: &[FeatureImage],
    depth_tol: f64,
) -> Result<Vec<VisiblePoint>, QueryError> {
    if images.is_empty() {
        return Err(QueryError::NoImages);
    }
    let mut candidates = Vec::new();
    for (si, scan) in scans.iter().enumerate() {
        let img_of: Vec<usize> = scan.rays.iter().map(|r| closest_image(images, r.time)).collect();
        let proj = par::map_indexed(scan.rays.len(), |ri| {
            let ray = &scan.rays[ri];
            if ray.miss {
                return None;
            }
            let img = &images[img_of[ri]];
            project_point(&img.camera_pose, &img.intrinsics, &ray.endpoint)
        });
        for (ri, p) in proj.into_iter().enumerate() {
            if let Some((u, v, depth)) = p {
                candidates.push(VisiblePoint {
                    scan: si,
                    ray: ri,
                    image: img_of[ri],
                    u,
                    v,
                    depth,
                });
            }
        }
    }
    let mut zbuf: HashMap<(usize, usize, usize), f64> = HashMap::new();
    for c in &candidates {
        let e = zbuf.entry((c.image, c.u, c.v)).or_insert(f64::INFINITY);
        *e = e.min(c.depth);
    }
    candidates.retain(|c| c.depth <= zbuf[&(c.image, c.u, c.v)] + depth_tol);
    Ok(candidates)
}

/// Feature-distillation queries at visible returns. Targets are the PCA
/// projection of the image feature at the pixel each return projects to.
pub fn gen_feature_queries(
    scans: &[LidarScan],
    images: &[FeatureImage],
    pca: &PcaModel,
    cfg: &SamplerConfig,
) -> Result<(Vec<Query>, bool), QueryError> {
    if let Some(img) = images.first() {
        if img.dim != pca.raw_dim() {
            return Err(PcaError::DimensionMismatch {
                expected: pca.raw_dim(),
                got: img.dim,
            }
            .into());
        }
    }
    let vis = visible_points(scans, images, cfg.depth_tol)?;
    let exhausted = vis.len() < cfg.n_feat;
    let keep = if vis.len() > cfg.n_feat {
        let mut rng = RayRng::new(cfg.seed, Domain::FeatureSubsample, 0);
        choose_sorted(&mut rng, vis.len(), cfg.n_feat)
    } else {
        (0..vis.len()).collect()
    };
    let out = par::map_indexed(keep.len(), |i| {
        let p = vis[keep[i]];
        let ray = &scans[p.scan].rays[p.ray];
        let mut rng = RayRng::new(cfg.seed, Domain::Feature, stream(p.scan as u64, p.ray as u64));
        let r = cfg.delta * rng.uniform_open();
        let target = pca.project(images[p.image].feature(p.u, p.v))?;
        Ok(Query {
            position: ray.endpoint + ray.direction * r,
            time: ray.time,
            target: Target::Feature(target),
            tag: SourceTag::Feature,
        })
    });
    Ok((out.into_iter().collect::<Result<_, PcaError>>()?, exhausted))
}

/// Rendered feature images keyed by `(scene digest, camera, time)`.
#[derive(Debug, Default)]
pub struct FeatureCache {
    images: HashMap<(String, u8, u64), Arc<FeatureImage>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get_or_render(&mut self, scene: &Scene, t: f64, dim: usize) -> Result<Arc<FeatureImage>, QueryError> {
        let key = (scene.digest(), 0u8, t.to_bits());
        if let Some(img) = self.images.get(&key) {
            return Ok(img.clone());
        }
        let pose = scene.camera_pose_at(t)?;
        let img = Arc::new(render_feature_image(scene, &pose, &scene.sensors.camera.intrinsics, t, dim));
        self.images.insert(key, img.clone());
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Pose, Ray, Vec3};
    use crate::scene::Intrinsics;

    fn flat_image(time: f64, dim: usize) -> FeatureImage {
        let intr = Intrinsics {
            width: 4,
            height: 4,
            fx: 4.0,
            fy: 4.0,
            cx: 2.0,
            cy: 2.0,
        };
        // Optical axis along +x of the world.
        let pose = Pose::new(
            nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
            Vec3::zeros(),
        )
        .unwrap();
        let n = intr.width * intr.height;
        FeatureImage {
            width: 4,
            height: 4,
            dim,
            features: (0..n * dim).map(|i| i as f64).collect(),
            depth: vec![f64::INFINITY; n],
            proto: vec![0; n],
            camera_pose: pose,
            intrinsics: intr,
            time,
        }
    }

    fn scan_of(points: &[Vec3]) -> LidarScan {
        LidarScan {
            rows: 1,
            cols: points.len(),
            max_range: 40.0,
            rays: points
                .iter()
                .map(|p| Ray::hit(Vec3::new(0.0, 0.0, 0.0), *p, 0.0))
                .collect(),
        }
    }

    #[test]
    fn occluded_point_is_dropped() {
        let scan = scan_of(&[Vec3::new(5.0, 0.01, 0.01), Vec3::new(12.0, 0.02, 0.02)]);
        let vis = visible_points(&[scan], &[flat_image(0.0, 4)], 0.2).unwrap();
        assert_eq!(vis.len(), 1);
        assert_eq!(vis[0].ray, 0);
        assert!((vis[0].depth - 5.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_and_outside_frustum_are_culled() {
        let scan = scan_of(&[Vec3::new(-5.0, 0.0, 0.0), Vec3::new(1.0, 5.0, 0.0), Vec3::new(3.0, 0.1, 0.1)]);
        let vis = visible_points(&[scan], &[flat_image(0.0, 4)], 0.2).unwrap();
        assert_eq!(vis.iter().map(|v| v.ray).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn closest_image_prefers_earlier_on_ties() {
        let imgs = vec![flat_image(1.0, 4), flat_image(0.0, 4), flat_image(2.0, 4)];
        assert_eq!(closest_image(&imgs, 0.5), 1);
        assert_eq!(closest_image(&imgs, 1.5), 0);
        assert_eq!(closest_image(&imgs, 1.9), 2);
    }

    #[test]
    fn empty_image_list_is_an_error() {
        let scan = scan_of(&[Vec3::new(5.0, 0.0, 0.0)]);
        assert_eq!(visible_points(&[scan], &[], 0.2), Err(QueryError::NoImages));
    }

    #[test]
    fn targets_are_projected_pixel_features() {
        let img = flat_image(0.0, 4);
        let samples: Vec<Vec<f64>> = (0..40)
            .map(|i| (0..4).map(|k| ((i * 7 + k * 3) % 11) as f64 + 0.1 * k as f64).collect())
            .collect();
        let pca = crate::pca::fit_pca(&samples, 2).unwrap();
        let scan = scan_of(&[Vec3::new(5.0, 0.01, 0.01)]);
        let cfg = SamplerConfig::default();
        let (q, exhausted) = gen_feature_queries(&[scan], &[img.clone()], &pca, &cfg).unwrap();
        assert!(exhausted);
        assert_eq!(q.len(), 1);
        let (u, v, _) = project_point(&img.camera_pose, &img.intrinsics, &Vec3::new(5.0, 0.01, 0.01)).unwrap();
        assert_eq!(q[0].target, Target::Feature(pca.project(img.feature(u, v)).unwrap()));
        assert!(q[0].position.x > 5.0 && q[0].position.x < 5.1);
    }

    #[test]
    fn subsampling_caps_the_count() {
        let pts: Vec<Vec3> = (0..16)
            .map(|i| Vec3::new(5.0, -1.0 + (i % 4) as f64 * 0.6, -1.0 + (i / 4) as f64 * 0.6))
            .collect();
        let img = flat_image(0.0, 4);
        let samples: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64, 1.0 + (i % 3) as f64, (i % 5) as f64]).collect();
        let pca = crate::pca::fit_pca(&samples, 2).unwrap();
        let cfg = SamplerConfig {
            n_feat: 5,
            ..SamplerConfig::default()
        };
        let (q, exhausted) = gen_feature_queries(&[scan_of(&pts)], &[img], &pca, &cfg).unwrap();
        assert!(!exhausted);
        assert_eq!(q.len(), 5);
    }
}
