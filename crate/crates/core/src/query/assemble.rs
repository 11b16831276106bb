use super::ego::gen_ego_path_queries;
use super::feature::gen_feature_queries;
use super::occupancy::{missing_for_scan, negatives_for_scan, positives_for_scan};
use super::{Query, QueryError, QuerySet, Roi, SamplerConfig, SourceTag};
use crate::geom::{rotate_about_z, AugmentConfig, Ray, Vec3};
use crate::pca::PcaModel;
use crate::rng::{Domain, RayRng};
use crate::scene::{FeatureImage, LidarScan, Scene};
use serde::{Deserialize, Serialize};

/// World-frame inputs of one training sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleSources<'a> {
    pub scene: &'a Scene,
    /// Reference time; the ego pose at `t0` defines the sample frame.
    pub t0: f64,
    pub past: &'a [LidarScan],
    pub future: &'a [LidarScan],
    pub images: &'a [FeatureImage],
}

/// Past lidar returns in the reference frame, one point list per scan.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncoderInput {
    pub scans: Vec<Vec<Vec3>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub theta: f64,
    /// Emitted queries per source tag, in tag order.
    pub counts: [usize; 6],
    /// Sources that produced fewer queries than configured.
    pub exhausted: Vec<SourceTag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: EncoderInput,
    pub queries: QuerySet,
    pub meta: SampleMeta,
}

/// Distance from `o` (inside the region) along `dir` to the region boundary;
/// zero when `o` is outside.
fn roi_exit(o: &Vec3, dir: &Vec3, roi: &Roi) -> f64 {
    let bounds = [roi.x, roi.y, roi.z];
    let mut exit = f64::INFINITY;
    for k in 0..3 {
        let (lo, hi) = bounds[k];
        if o[k] < lo || o[k] > hi {
            return 0.0;
        }
        if dir[k] > 0.0 {
            exit = exit.min((hi - o[k]) / dir[k]);
        } else if dir[k] < 0.0 {
            exit = exit.min((lo - o[k]) / dir[k]);
        }
    }
    exit
}

/// Splits a scan into a copy with every ray cut at the region boundary
/// (free-space evidence) and a copy keeping only returns inside the region.
fn clip_to_roi(scan: &LidarScan, roi: &Roi) -> (LidarScan, LidarScan) {
    let mut free = scan.clone();
    let mut solid = scan.clone();
    for (i, r) in scan.rays.iter().enumerate() {
        let len = r.length();
        let exit = roi_exit(&r.origin, &r.direction, roi);
        if exit < len {
            free.rays[i] = Ray {
                endpoint: r.origin + r.direction * exit,
                ..*r
            };
            solid.rays[i].miss = true;
        }
    }
    (free, solid)
}

fn share(n: usize, k: usize, i: usize) -> usize {
    n / k + usize::from(i < n % k)
}

/// Builds one training sample from world-frame sensor data.
///
/// Positions are expressed in the ego frame at `t0`, times relative to
/// `t0`. Output order is by source tag, then generator order. Rotation is
/// applied to the finished sample, so every position equals the unrotated
/// position rotated by the drawn angle.
pub fn assemble_sample(
    src: &SampleSources,
    pca: &PcaModel,
    cfg: &SamplerConfig,
    aug: &AugmentConfig,
) -> Result<Sample, QueryError> {
    cfg.validate()?;
    aug.validate().map_err(|_| QueryError::InvalidConfig("invalid augmentation"))?;
    let roi = cfg.roi;
    let cfg = SamplerConfig {
        jitter_tau: if aug.jitter_enabled { aug.jitter_tau } else { cfg.jitter_tau },
        ..*cfg
    };
    let to_ref = src.scene.ego_pose_at(src.t0)?.inverse();
    let future: Vec<LidarScan> = src
        .future
        .iter()
        .map(|s| s.transformed(&to_ref).time_shifted(-src.t0))
        .collect();
    for s in &future {
        if let Some(r) = s.rays.iter().find(|r| r.time < -1e-9 || r.time > roi.t_max + 1e-9) {
            return Err(QueryError::ScanOutsideWindow(r.time));
        }
    }
    let images: Vec<FeatureImage> = src.images.iter().map(|i| i.reframed(&to_ref, -src.t0)).collect();
    let (free, solid): (Vec<_>, Vec<_>) = future.iter().map(|s| clip_to_roi(s, &roi)).unzip();

    let with_hits: Vec<usize> = (0..future.len()).filter(|&i| solid[i].hit_count() > 0).collect();
    if with_hits.is_empty() {
        return Err(QueryError::EmptyScan);
    }
    let k = with_hits.len();
    let mut neg = Vec::with_capacity(cfg.n_occ_neg);
    let mut pos = Vec::with_capacity(cfg.n_occ_pos);
    let mut miss = Vec::new();
    for (j, &i) in with_hits.iter().enumerate() {
        neg.extend(negatives_for_scan(&free[i], &cfg, share(cfg.n_occ_neg, k, j), i as u64)?);
        pos.extend(positives_for_scan(&solid[i], &cfg, share(cfg.n_occ_pos, k, j), i as u64)?);
    }
    if cfg.missing_rays {
        for (i, s) in free.iter().enumerate() {
            miss.extend(missing_for_scan(s, &cfg, i as u64));
        }
    }
    let (feat, feat_short) = gen_feature_queries(&solid, &images, pca, &cfg)?;
    let ego = gen_ego_path_queries(src.scene, src.t0, &cfg)?;

    let theta = if aug.rotation_enabled {
        aug.theta_override
            .unwrap_or_else(|| RayRng::new(cfg.seed, Domain::Rotation, 0).range(aug.theta_min, aug.theta_max))
    } else {
        0.0
    };
    let mut queries: Vec<Query> = neg.into_iter().chain(pos).chain(miss).chain(feat).chain(ego).collect();
    let mut input = EncoderInput {
        scans: src
            .past
            .iter()
            .map(|s| s.hits().map(|r| to_ref.transform_point(&r.endpoint)).collect())
            .collect(),
    };
    if theta != 0.0 {
        for q in &mut queries {
            q.position = rotate_about_z(&q.position, theta);
        }
        for pts in &mut input.scans {
            for p in pts.iter_mut() {
                *p = rotate_about_z(p, theta);
            }
        }
    }
    let mut counts = [0usize; 6];
    for q in &queries {
        counts[q.tag as usize] += 1;
    }
    let mut exhausted = Vec::new();
    if feat_short {
        exhausted.push(SourceTag::Feature);
    }
    Ok(Sample {
        input,
        queries: QuerySet {
            feature_dim: pca.d(),
            queries,
        },
        meta: SampleMeta {
            seed: cfg.seed,
            theta,
            counts,
            exhausted,
        },
    })
}
