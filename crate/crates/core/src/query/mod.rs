//! Turning future sensor data into 4D supervision.
//!
//! A training sample is the union of occupancy queries sampled along lidar
//! rays, feature queries at visible lidar returns, and ego-path queries
//! around the future driven path. All positions live in the reference
//! frame (ego at `t0`) and all times are relative to `t0`.

mod assemble;
mod ego;
mod feature;
mod occupancy;

pub use assemble::{assemble_sample, EncoderInput, Sample, SampleMeta, SampleSources};
pub use ego::{distance_to_path_xy, ego_path_in_reference, gen_ego_path_queries};
pub use feature::{gen_feature_queries, visible_points, FeatureCache, VisiblePoint};
pub use occupancy::{
    gen_missing_ray_negatives, gen_occupancy_negatives, gen_occupancy_positives,
    missing_ray_regions, MissRegion,
};

use crate::format::{self, FormatError, Reader, Writer};
use crate::geom::Vec3;
use crate::pca::PcaError;
use crate::scene::SceneError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QueryError {
    #[error("scan has no hit rays")]
    EmptyScan,
    #[error("no feature images supplied")]
    NoImages,
    #[error("ego trajectory ends at {end} s, shorter than the {needed} s horizon")]
    TrajectoryTooShort { end: f64, needed: f64 },
    #[error("could not place an ego negative outside the tube after {0} attempts")]
    RejectionCap(usize),
    #[error("future scan at relative time {0} s outside [0, T_max]")]
    ScanOutsideWindow(f64),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Pca(#[from] PcaError),
}

/// Where a query came from. The discriminant is the on-disk tag byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum SourceTag {
    RayNegative = 0,
    RayPositive = 1,
    MissingRay = 2,
    Feature = 3,
    EgoPositive = 4,
    EgoNegative = 5,
}

impl SourceTag {
    pub const ALL: [SourceTag; 6] = [
        SourceTag::RayNegative,
        SourceTag::RayPositive,
        SourceTag::MissingRay,
        SourceTag::Feature,
        SourceTag::EgoPositive,
        SourceTag::EgoNegative,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceTag::RayNegative => "ray_negative",
            SourceTag::RayPositive => "ray_positive",
            SourceTag::MissingRay => "missing_ray",
            SourceTag::Feature => "feature",
            SourceTag::EgoPositive => "ego_pos",
            SourceTag::EgoNegative => "ego_neg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Occupancy(u8),
    Feature(Vec<f64>),
    Ego(u8),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub position: Vec3,
    pub time: f64,
    pub target: Target,
    pub tag: SourceTag,
}

impl Query {
    pub fn occupancy(position: Vec3, time: f64, label: u8, tag: SourceTag) -> Self {
        Self {
            position,
            time,
            target: Target::Occupancy(label),
            tag,
        }
    }
}

/// Axis-aligned 4D region of interest; `t` spans `[0, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
    pub t_max: f64,
}

impl Roi {
    pub fn contains_xy(&self, p: &Vec3) -> bool {
        p.x >= self.x.0 && p.x <= self.x.1 && p.y >= self.y.0 && p.y <= self.y.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Length of the occupied buffer behind each return (m).
    pub delta: f64,
    pub n_occ_pos: usize,
    pub n_occ_neg: usize,
    pub n_feat: usize,
    pub n_ego_pos: usize,
    pub n_ego_neg: usize,
    /// Ego-path tube radius in the x-y plane (m).
    pub w_ego: f64,
    pub roi: Roi,
    pub jitter_tau: f64,
    pub missing_rays: bool,
    pub missing_ray_min_run: usize,
    pub missing_ray_samples_per_ray: usize,
    /// Slack on the per-pixel minimum depth (m).
    pub depth_tol: f64,
    pub ego_rejection_cap: usize,
    pub seed: u64,
}

/// Full-scale query counts; the desk defaults are one hundredth of these.
pub const FULL_N_OCC: usize = 900_000;
pub const FULL_N_FEAT: usize = 100_000;
pub const FULL_N_EGO: usize = 10_000;

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            n_occ_pos: FULL_N_OCC / 100,
            n_occ_neg: FULL_N_OCC / 100,
            n_feat: FULL_N_FEAT / 100,
            n_ego_pos: FULL_N_EGO / 100,
            n_ego_neg: FULL_N_EGO / 100,
            w_ego: 1.0,
            roi: Roi {
                x: (-12.0, 12.0),
                y: (-12.0, 12.0),
                z: (-1.0, 4.0),
                t_max: 3.0,
            },
            jitter_tau: 1.0,
            missing_rays: true,
            missing_ray_min_run: 5,
            missing_ray_samples_per_ray: 2,
            depth_tol: 0.2,
            ego_rejection_cap: 100,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn full_scale() -> Self {
        Self {
            n_occ_pos: FULL_N_OCC,
            n_occ_neg: FULL_N_OCC,
            n_feat: FULL_N_FEAT,
            n_ego_pos: FULL_N_EGO,
            n_ego_neg: FULL_N_EGO,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        let bad = |m| Err(QueryError::InvalidConfig(m));
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if !(self.w_ego > 0.0) {
            return bad("w_ego must be positive");
        }
        if !(self.roi.t_max > 0.0) {
            return bad("t_max must be positive");
        }
        if !(self.jitter_tau > 0.0) {
            return bad("jitter_tau must be positive");
        }
        if self.missing_ray_min_run < 1 {
            return bad("missing_ray_min_run must be >= 1");
        }
        if !(self.roi.x.0 < self.roi.x.1 && self.roi.y.0 < self.roi.y.1 && self.roi.z.0 <= self.roi.z.1) {
            return bad("roi extents must be ordered");
        }
        Ok(())
    }
}

/// An ordered list of queries with a fixed feature dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    pub feature_dim: usize,
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn count(&self, tag: SourceTag) -> usize {
        self.queries.iter().filter(|q| q.tag == tag).count()
    }

    /// Record layout: `tag:u8, time:f32, position:3×f32`, then either a
    /// `u8` label or `feature_dim × f32`; a trailing `u64` record count.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(format::QUERYSET_MAGIC, self.feature_dim as u32);
        for q in &self.queries {
            w.u8(q.tag as u8);
            w.f32(q.time as f32);
            for k in 0..3 {
                w.f32(q.position[k] as f32);
            }
            match &q.target {
                Target::Occupancy(l) | Target::Ego(l) => w.u8(*l),
                Target::Feature(f) => {
                    debug_assert_eq!(f.len(), self.feature_dim);
                    for &x in f {
                        w.f32(x as f32);
                    }
                }
            }
        }
        w.u64(self.queries.len() as u64);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (mut r, dim) = Reader::with_header(bytes, format::QUERYSET_MAGIC)?;
        let dim = dim as usize;
        if bytes.len() < 24 {
            return Err(FormatError::Truncated);
        }
        let body_end = bytes.len() - 8;
        let expected = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let mut queries = Vec::new();
        while r.remaining() > 8 {
            let tag = r.u8()?;
            let tag = SourceTag::from_u8(tag).ok_or_else(|| FormatError::Corrupt(format!("tag {tag}")))?;
            let time = r.f32()? as f64;
            let position = Vec3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
            let target = match tag {
                SourceTag::Feature => {
                    Target::Feature((0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<_, _>>()?)
                }
                SourceTag::EgoPositive | SourceTag::EgoNegative => Target::Ego(label(r.u8()?)?),
                _ => Target::Occupancy(label(r.u8()?)?),
            };
            queries.push(Query {
                position,
                time,
                target,
                tag,
            });
        }
        let count = r.u64()?;
        r.expect_end()?;
        if count != expected || count as usize != queries.len() {
            return Err(FormatError::Corrupt(format!(
                "record count {count} but {} records",
                queries.len()
            )));
        }
        Ok(Self {
            feature_dim: dim,
            queries,
        })
    }
}

fn label(v: u8) -> Result<u8, FormatError> {
    if v <= 1 {
        Ok(v)
    } else {
        Err(FormatError::Corrupt(format!("label {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_regime() {
        let c = SamplerConfig::default();
        assert_eq!(c.delta, 0.1);
        assert_eq!(c.w_ego, 1.0);
        assert_eq!(c.jitter_tau, 1.0);
        assert_eq!(c.roi.t_max, 3.0);
        assert_eq!(c.n_occ_pos, 9_000);
        assert_eq!(c.n_feat, 1_000);
        assert_eq!(c.n_ego_neg, 100);
        let p = SamplerConfig::full_scale();
        assert_eq!((p.n_occ_pos, p.n_occ_neg, p.n_feat, p.n_ego_pos), (900_000, 900_000, 100_000, 10_000));
        assert!(c.validate().is_ok());
        assert!(SamplerConfig { delta: 0.0, ..c }.validate().is_err());
        assert!(SamplerConfig { missing_ray_min_run: 0, ..c }.validate().is_err());
    }

    #[test]
    fn golden_bytes() {
        let qs = QuerySet {
            feature_dim: 2,
            queries: vec![
                Query::occupancy(Vec3::new(1.0, 2.0, 3.0), 0.5, 1, SourceTag::RayPositive),
                Query {
                    position: Vec3::new(-1.0, 0.0, 0.25),
                    time: 2.0,
                    target: Target::Feature(vec![1.5, -2.0]),
                    tag: SourceTag::Feature,
                },
            ],
        };
        let b = qs.to_bytes();
        let expected_hex = concat!(
            "4f43433444515259", "01000000", "02000000",
            "01", "0000003f", "0000803f", "00000040", "00004040", "01",
            "03", "00000040", "000080bf", "00000000", "0000803e", "0000c03f", "000000c0",
            "0200000000000000"
        );
        let hex: String = b.iter().map(|x| format!("{x:02x}")).collect();
        assert_eq!(hex, expected_hex);
        assert_eq!(QuerySet::from_bytes(&b).unwrap(), qs);
    }

    #[test]
    fn rejects_corruption() {
        let qs = QuerySet {
            feature_dim: 0,
            queries: vec![Query::occupancy(Vec3::zeros(), 0.0, 0, SourceTag::RayNegative)],
        };
        let mut b = qs.to_bytes();
        let n = b.len();
        b[n - 8] = 5;
        assert!(QuerySet::from_bytes(&b).is_err());
        let mut b = qs.to_bytes();
        b[16] = 9;
        assert!(QuerySet::from_bytes(&b).is_err());
        assert!(QuerySet::from_bytes(&qs.to_bytes()[..20]).is_err());
    }
}
