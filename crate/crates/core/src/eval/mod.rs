//! Evaluation: ray-traced voxel labels, ranking metrics and the 4D
//! occupancy and ego-path harnesses.

mod metrics;
mod raytrace;

pub use metrics::{average_precision, oracle, recall_at_precision, soft_iou, threshold_sweep, SweepPoint};
pub use raytrace::{label_by_raytrace, label_by_slab_oracle, match_scan, Label, MATCH_WINDOW};

use crate::field::{encode, FieldError, FieldParams, Head};
use crate::geom::Vec3;
use crate::query::{distance_to_path_xy, ego_path_in_reference, EncoderInput, QueryError};
use crate::scene::{cast_lidar_scan, LidarScan, Scene, SceneError};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("scores must be finite")]
    NonFiniteScore,
    #[error("scores must lie in [0, 1]")]
    ScoreRange,
    #[error("degenerate label set: {0}")]
    Degenerate(&'static str),
    #[error("invalid evaluation grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Query(#[from] QueryError),
}

pub const DEFAULT_PRECISION: f64 = 0.7;

/// Probe voxels over a box, at several probe times. Voxel `(ix, iy, iz)`
/// spans `[lo + i * step, lo + (i + 1) * step)` on each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub step: f64,
    pub times: Vec<f64>,
    pub t_max: f64,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self {
            x_range: (-16.0, 16.0),
            y_range: (-16.0, 16.0),
            // Ground at 0 falls on a face, so no probe center sits on it.
            z_range: (-0.2, 3.0),
            step: 0.2,
            times: vec![0.6, 1.2, 1.8, 2.4, 3.0],
            t_max: 3.0,
        }
    }
}

impl EvalGrid {
    fn cells(range: (f64, f64), step: f64) -> usize {
        ((range.1 - range.0) / step).round() as usize
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (
            Self::cells(self.x_range, self.step),
            Self::cells(self.y_range, self.step),
            Self::cells(self.z_range, self.step),
        )
    }

    pub fn len(&self) -> usize {
        let (x, y, z) = self.dims();
        x * y * z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index, x fastest then y then z.
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let (nx, ny, _) = self.dims();
        (iz * ny + iy) * nx + ix
    }

    pub fn center(&self, i: usize) -> Vec3 {
        let (nx, ny, _) = self.dims();
        let (ix, iy, iz) = (i % nx, (i / nx) % ny, i / (nx * ny));
        let c = |lo: f64, k: usize| lo + (k as f64 + 0.5) * self.step;
        Vec3::new(c(self.x_range.0, ix), c(self.y_range.0, iy), c(self.z_range.0, iz))
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Grid(m));
        if !(self.step > 0.0) {
            return bad("step must be positive".into());
        }
        for (name, r) in [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)] {
            let n = (r.1 - r.0) / self.step;
            if !(n >= 1.0) || (n - n.round()).abs() > 1e-6 {
                return bad(format!("{name} range must span a positive whole number of steps"));
            }
        }
        if let Some(t) = self.times.iter().find(|&&t| !(0.0..=self.t_max).contains(&t)) {
            return bad(format!("probe time {t} outside [0, {}]", self.t_max));
        }
        Ok(())
    }
}

/// One evaluation scene, simulated in the frame of the ego at `t0`.
#[derive(Debug, Clone)]
pub struct EvalScene {
    pub scene: Scene,
    pub t0: f64,
    /// Past returns fed to the encoder.
    pub input: EncoderInput,
    /// One scan per probe time, in the evaluation frame with times relative to `t0`.
    pub scans: Vec<LidarScan>,
}

/// Lidar scan at world time `t` from the scene's own rig.
pub fn scan_at(scene: &Scene, t: f64) -> Result<LidarScan, SceneError> {
    Ok(cast_lidar_scan(scene, &scene.lidar_pose_at(t)?, &scene.sensors.lidar.pattern, t))
}

impl EvalScene {
    /// Casts past scans at `t0 + past_offsets` and one scan per probe time.
    pub fn simulate(scene: Scene, t0: f64, past_offsets: &[f64], grid: &EvalGrid) -> Result<Self, EvalError> {
        let to_ref = scene.ego_pose_at(t0)?.inverse();
        let mut input = EncoderInput::default();
        for &dt in past_offsets {
            let s = scan_at(&scene, t0 + dt)?;
            input.scans.push(s.hits().map(|r| to_ref.transform_point(&r.endpoint)).collect());
        }
        let scans = grid
            .times
            .iter()
            .map(|&t| Ok(scan_at(&scene, t0 + t)?.transformed(&to_ref).time_shifted(-t0)))
            .collect::<Result<Vec<_>, EvalError>>()?;
        Ok(Self {
            scene,
            t0,
            input,
            scans,
        })
    }

    fn to_world(&self) -> Result<crate::geom::Pose, SceneError> {
        self.scene.ego_pose_at(self.t0)
    }

    /// Exact occupancy of every probe voxel center, per probe time.
    pub fn oracle_labels(&self, grid: &EvalGrid) -> Result<Vec<Vec<bool>>, EvalError> {
        let pose = self.to_world()?;
        grid.times
            .iter()
            .map(|&t| {
                let tw = self.t0 + t;
                let v = crate::par::map_indexed(grid.len(), |i| self.scene.occupancy_oracle(&pose.transform_point(&grid.center(i)), tw));
                v.into_iter().collect::<Result<Vec<_>, _>>().map_err(EvalError::from)
            })
            .collect()
    }

    pub fn raytrace_labels(&self, grid: &EvalGrid) -> Result<Vec<Vec<Label>>, EvalError> {
        let pose = self.to_world()?;
        let boxes = &self.scene.boxes;
        let t0 = self.t0;
        let in_box = move |p: &Vec3, t: f64| {
            let w = pose.transform_point(p);
            boxes.iter().any(|b| b.contains(&w, t0 + t))
        };
        label_by_raytrace(&self.scans, grid, &in_box)
    }
}

/// Recall at precision, AP and Soft-IoU of one labeled probe set; `None`
/// when a metric is undefined for the labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub r_at_p: Option<f64>,
    pub ap: Option<f64>,
    pub soft_iou: Option<f64>,
}

impl Metrics {
    pub fn compute(scores: &[f64], labels: &[bool], target: f64) -> Result<Self, EvalError> {
        let lenient = |r: Result<f64, EvalError>| match r {
            Ok(v) => Ok(Some(v)),
            Err(EvalError::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            r_at_p: lenient(recall_at_precision(scores, labels, target).map(|r| r.0))?,
            ap: lenient(average_precision(scores, labels))?,
            soft_iou: lenient(soft_iou(scores, labels))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ProbeCounts {
    pub free: usize,
    pub occupied: usize,
    pub unknown: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBreakdown {
    pub time: f64,
    pub raytrace: Metrics,
    pub oracle: Metrics,
    pub probe_counts: ProbeCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyEval {
    /// Against ray-traced labels, unknown probes excluded.
    pub raytrace: Metrics,
    /// Against the exact simulator occupancy at every probe.
    pub oracle: Metrics,
    pub per_time: Vec<TimeBreakdown>,
    pub probe_counts: ProbeCounts,
    /// Fraction of ray-traced (non-unknown) probes whose label equals the oracle.
    pub label_agreement: Option<f64>,
}

#[derive(Default)]
struct Pool {
    rt_scores: Vec<f64>,
    rt_labels: Vec<bool>,
    or_scores: Vec<f64>,
    or_labels: Vec<bool>,
    counts: ProbeCounts,
    agree: usize,
}

impl Pool {
    fn add(&mut self, scores: &[f64], rt: &[Label], exact: &[bool]) {
        for i in 0..scores.len() {
            self.or_scores.push(scores[i]);
            self.or_labels.push(exact[i]);
            match rt[i] {
                Label::Unknown => self.counts.unknown += 1,
                l => {
                    let occ = l == Label::Occupied;
                    if occ {
                        self.counts.occupied += 1;
                    } else {
                        self.counts.free += 1;
                    }
                    self.agree += usize::from(occ == exact[i]);
                    self.rt_scores.push(scores[i]);
                    self.rt_labels.push(occ);
                }
            }
        }
    }

    fn metrics(&self, target: f64) -> Result<(Metrics, Metrics), EvalError> {
        Ok((
            Metrics::compute(&self.rt_scores, &self.rt_labels, target)?,
            Metrics::compute(&self.or_scores, &self.or_labels, target)?,
        ))
    }
}

/// Occupancy probabilities of every probe at every probe time.
pub fn occupancy_scores(params: &FieldParams, scene: &EvalScene, grid: &EvalGrid) -> Result<Vec<Vec<f64>>, EvalError> {
    let z = encode(params, &scene.input)?;
    grid.times
        .iter()
        .map(|&t| {
            let pts: Vec<[f64; 4]> = (0..grid.len())
                .map(|i| {
                    let c = grid.center(i);
                    [c.x, c.y, c.z, t]
                })
                .collect();
            Ok(params.occupancy_probabilities(&z, &pts)?)
        })
        .collect()
}

/// Scores every probe of every scene and pools them per time and overall.
pub fn eval_4d_occupancy(
    params: &FieldParams,
    scenes: &[EvalScene],
    grid: &EvalGrid,
    precision_target: f64,
) -> Result<OccupancyEval, EvalError> {
    grid.validate()?;
    let mut total = Pool::default();
    let mut per: Vec<Pool> = grid.times.iter().map(|_| Pool::default()).collect();
    for s in scenes {
        let scores = occupancy_scores(params, s, grid)?;
        let rt = s.raytrace_labels(grid)?;
        let exact = s.oracle_labels(grid)?;
        for ti in 0..grid.times.len() {
            total.add(&scores[ti], &rt[ti], &exact[ti]);
            per[ti].add(&scores[ti], &rt[ti], &exact[ti]);
        }
    }
    let (raytrace, oracle) = total.metrics(precision_target)?;
    let mut per_time = Vec::new();
    for (ti, p) in per.iter().enumerate() {
        let (r, o) = p.metrics(precision_target)?;
        per_time.push(TimeBreakdown {
            time: grid.times[ti],
            raytrace: r,
            oracle: o,
            probe_counts: p.counts,
        });
    }
    let known = total.rt_labels.len();
    Ok(OccupancyEval {
        raytrace,
        oracle,
        per_time,
        probe_counts: total.counts,
        label_agreement: (known > 0).then(|| total.agree as f64 / known as f64),
    })
}

/// Bird's-eye lattice of ego-path probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoEvalConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub step: f64,
    /// Height and time at which the lattice is queried.
    pub z: f64,
    pub time: f64,
    pub w_ego: f64,
    pub t_max: f64,
}

impl Default for EgoEvalConfig {
    fn default() -> Self {
        Self {
            x_range: (-12.0, 12.0),
            y_range: (-12.0, 12.0),
            step: 0.5,
            z: 1.0,
            time: 1.5,
            w_ego: 1.0,
            t_max: 3.0,
        }
    }
}

impl EgoEvalConfig {
    fn dims(&self) -> (usize, usize) {
        (
            EvalGrid::cells(self.x_range, self.step),
            EvalGrid::cells(self.y_range, self.step),
        )
    }

    /// Probe centers, row-major with row 0 at the largest x and column 0 at
    /// the largest y, so forward points up and left points left.
    pub fn probes(&self) -> Vec<Vec3> {
        let (nx, ny) = self.dims();
        let mut out = Vec::with_capacity(nx * ny);
        for row in 0..nx {
            for col in 0..ny {
                let x = self.x_range.1 - (row as f64 + 0.5) * self.step;
                let y = self.y_range.1 - (col as f64 + 0.5) * self.step;
                out.push(Vec3::new(x, y, self.z));
            }
        }
        out
    }
}

/// Gray-scale raster of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevRaster {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl BevRaster {
    /// Binary PGM (P5), 255 = 1.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoEval {
    pub ap: Option<f64>,
    pub base_rate: f64,
    /// Predicted probability raster per scene.
    pub rasters: Vec<BevRaster>,
    /// Tube-label raster per scene.
    pub label_rasters: Vec<BevRaster>,
}

/// Tube labels of the lattice probes for one scene.
pub fn ego_labels(scene: &EvalScene, cfg: &EgoEvalConfig) -> Result<Vec<bool>, EvalError> {
    let path = ego_path_in_reference(&scene.scene, scene.t0, cfg.t_max)?;
    Ok(cfg.probes().iter().map(|p| distance_to_path_xy(p, &path) <= cfg.w_ego).collect())
}

pub fn eval_ego_path(params: &FieldParams, scenes: &[EvalScene], cfg: &EgoEvalConfig) -> Result<EgoEval, EvalError> {
    let (nx, ny) = cfg.dims();
    if !(cfg.step > 0.0) || nx == 0 || ny == 0 {
        return Err(EvalError::Grid("ego lattice must be non-empty".into()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut rasters = Vec::new();
    let mut label_rasters = Vec::new();
    for s in scenes {
        let z = encode(params, &s.input)?;
        let pts: Vec<[f64; 4]> = cfg.probes().iter().map(|p| [p.x, p.y, p.z, cfg.time]).collect();
        let p = params.head_probabilities(&z, &pts, Head::Ego)?;
        let l = ego_labels(s, cfg)?;
        rasters.push(BevRaster {
            width: ny,
            height: nx,
            values: p.clone(),
        });
        label_rasters.push(BevRaster {
            width: ny,
            height: nx,
            values: l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        });
        scores.extend(p);
        labels.extend(l);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let ap = match average_precision(&scores, &labels) {
        Ok(v) => Some(v),
        Err(EvalError::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EgoEval {
        ap,
        base_rate: if labels.is_empty() { 0.0 } else { pos as f64 / labels.len() as f64 },
        rasters,
        label_rasters,
    })
}

/// Evaluation summary, serialized with a fixed key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub r_at_p70: Option<f64>,
    pub ap_occ: Option<f64>,
    pub soft_iou: Option<f64>,
    pub ap_ego: Option<f64>,
    pub per_time_breakdown: Vec<TimeBreakdown>,
    pub probe_counts: ProbeCounts,
    pub precision_target: f64,
    pub oracle: Metrics,
    pub label_agreement: Option<f64>,
    pub ego_base_rate: f64,
}

impl EvalReport {
    pub fn new(config_digest: String, occ: OccupancyEval, ego: &EgoEval, precision_target: f64) -> Self {
        Self {
            config_digest,
            r_at_p70: occ.raytrace.r_at_p,
            ap_occ: occ.raytrace.ap,
            soft_iou: occ.raytrace.soft_iou,
            ap_ego: ego.ap,
            per_time_breakdown: occ.per_time,
            probe_counts: occ.probe_counts,
            precision_target,
            oracle: occ.oracle,
            label_agreement: occ.label_agreement,
            ego_base_rate: ego.base_rate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
