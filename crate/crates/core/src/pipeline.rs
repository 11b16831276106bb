//! Artifact-level stages: simulate a scene suite to disk, generate query
//! sets, train, evaluate and sweep sample counts. Every output directory
//! carries a `manifest.json` with the stage config, its digest and the byte
//! length and SHA-256 of every file.

use crate::eval::{eval_4d_occupancy, eval_ego_path, EgoEvalConfig, EvalError, EvalGrid, EvalReport, EvalScene};
use crate::field::{train, AdamState, Checkpoint, FieldConfig, FieldError, FieldParams, Mode, TrainConfig, TrainRecord};
use crate::format::{self, sha256_hex, FormatError};
use crate::geom::AugmentConfig;
use crate::pca::{fit_pca, PcaError, PcaModel};
use crate::query::{assemble_sample, EncoderInput, QueryError, QuerySet, Sample, SampleMeta, SampleSources, SamplerConfig};
use crate::rng::{choose_sorted, Domain, RayRng};
use crate::scene::{cast_lidar_scan, generate_scene, render_feature_image, FeatureImage, LidarScan, Scene, SceneError, SceneKnobs};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Json { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("config digest mismatch: checkpoint has {got}, expected {expected} (use --force to override)")]
    DigestMismatch { expected: String, got: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("sample {index}: {source}")]
    Sample { index: usize, source: QueryError },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    io(path, fs::read(path))
}

/// Parses a JSON config, reporting the line and column of any error.
pub fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = io(path, fs::read_to_string(path))?;
    parse_json(path, &text)
}

/// SHA-256 of the canonical JSON of `{config, upstream}`.
pub fn config_digest<C: Serialize>(config: &C, upstream: &[&str]) -> String {
    let v = serde_json::json!({ "config": config, "upstream": upstream });
    sha256_hex(serde_json::to_string(&v).expect("config serializes").as_bytes())
}

/// Reference time, encoder history and supervision horizon of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleTiming {
    pub t0: f64,
    /// Past scan times relative to `t0`.
    pub past_offsets: Vec<f64>,
    pub future_step: f64,
    pub horizon: f64,
}

impl Default for SampleTiming {
    fn default() -> Self {
        Self {
            t0: 1.0,
            past_offsets: vec![-1.0, -0.5, 0.0],
            future_step: 0.5,
            horizon: 3.0,
        }
    }
}

impl SampleTiming {
    pub fn validate(&self) -> Result<()> {
        if !(self.future_step > 0.0) || !(self.horizon >= 0.0) {
            return Err(PipelineError::Config("future_step must be positive and horizon non-negative".into()));
        }
        if self.past_offsets.iter().any(|&d| !(d <= 0.0)) {
            return Err(PipelineError::Config("past offsets must be <= 0".into()));
        }
        Ok(())
    }

    /// World times of the supervision scans and images.
    pub fn future_times(&self) -> Vec<f64> {
        let n = (self.horizon / self.future_step + 1e-9).floor() as usize;
        (0..=n).map(|k| self.t0 + k as f64 * self.future_step).collect()
    }

    pub fn past_times(&self) -> Vec<f64> {
        self.past_offsets.iter().map(|d| self.t0 + d).collect()
    }

    /// Sorted distinct world times at which a scan is cast.
    pub fn scan_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.past_times().into_iter().chain(self.future_times()).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

/// World-frame sensor data of one scene.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub scene: Scene,
    pub past: Vec<LidarScan>,
    pub future: Vec<LidarScan>,
    pub images: Vec<FeatureImage>,
}

fn scan_at(scene: &Scene, t: f64) -> Result<LidarScan> {
    Ok(cast_lidar_scan(scene, &scene.lidar_pose_at(t)?, &scene.sensors.lidar.pattern, t))
}

fn image_at(scene: &Scene, t: f64, raw_dim: usize) -> Result<FeatureImage> {
    let pose = scene.camera_pose_at(t)?;
    Ok(render_feature_image(scene, &pose, &scene.sensors.camera.intrinsics, t, raw_dim))
}

pub fn simulate_scene_data(scene: Scene, timing: &SampleTiming, raw_dim: usize) -> Result<SceneData> {
    timing.validate()?;
    let past = timing.past_times().iter().map(|&t| scan_at(&scene, t)).collect::<Result<_>>()?;
    let future = timing.future_times().iter().map(|&t| scan_at(&scene, t)).collect::<Result<_>>()?;
    let images = timing.future_times().iter().map(|&t| image_at(&scene, t, raw_dim)).collect::<Result<_>>()?;
    Ok(SceneData {
        scene,
        past,
        future,
        images,
    })
}

/// Fits the feature reduction on a seeded subset of at most `subset`
/// pixels drawn from every image.
pub fn fit_dataset_pca<'a>(
    images: impl Iterator<Item = &'a FeatureImage> + Clone,
    d: usize,
    subset: usize,
    seed: u64,
) -> Result<PcaModel> {
    let total: usize = images.clone().map(|i| i.width * i.height).sum();
    let mut rng = RayRng::new(seed, Domain::PcaSubset, 0);
    let picks = choose_sorted(&mut rng, total, subset.min(total));
    let mut samples: Vec<&[f64]> = Vec::with_capacity(picks.len());
    let mut offset = 0;
    let mut k = 0;
    for img in images {
        let n = img.width * img.height;
        while k < picks.len() && picks[k] < offset + n {
            let px = picks[k] - offset;
            samples.push(img.feature(px % img.width, px / img.width));
            k += 1;
        }
        offset += n;
    }
    Ok(fit_pca(&samples, d)?)
}

/// Per-sample sampler seed derived from the run seed.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    RayRng::new(seed, Domain::Generic, index as u64).next_u64()
}

pub fn build_sample(
    data: &SceneData,
    timing: &SampleTiming,
    pca: &PcaModel,
    sampler: &SamplerConfig,
    aug: &AugmentConfig,
) -> std::result::Result<Sample, QueryError> {
    let src = SampleSources {
        scene: &data.scene,
        t0: timing.t0,
        past: &data.past,
        future: &data.future,
        images: &data.images,
    };
    assemble_sample(&src, pca, sampler, aug)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config_digest: String,
    pub config: serde_json::Value,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path, kind: &str) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let m: Manifest = read_json(&path)?;
        if m.kind != kind {
            return Err(PipelineError::Manifest {
                path,
                msg: format!("expected a {kind} manifest, found {}", m.kind),
            });
        }
        Ok(m)
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self, dir: &Path) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| PipelineError::Json {
            path: dir.join(MANIFEST),
            msg: e.to_string(),
        })
    }

    /// Reads a listed file and checks its length and digest.
    pub fn read(&self, dir: &Path, rel: &str) -> Result<Vec<u8>> {
        let path = dir.join(rel);
        let entry = self.files.iter().find(|f| f.path == rel).ok_or_else(|| PipelineError::Manifest {
            path: path.clone(),
            msg: "not listed in manifest".into(),
        })?;
        let bytes = read_bytes(&path)?;
        if bytes.len() as u64 != entry.bytes || sha256_hex(&bytes) != entry.sha256 {
            return Err(PipelineError::Manifest {
                path,
                msg: "content does not match manifest".into(),
            });
        }
        Ok(bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

/// Writes files into a staging directory and moves it into place on
/// `finish`, so a failed run never leaves a half-written output.
pub struct Staging {
    tmp: PathBuf,
    target: PathBuf,
    files: Vec<FileEntry>,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self> {
        if target.exists() && !target.join(MANIFEST).exists() && io(target, fs::read_dir(target))?.next().is_some() {
            return Err(PipelineError::Config(format!(
                "{} exists and is not an artifact directory",
                target.display()
            )));
        }
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        io(parent, fs::create_dir_all(parent))?;
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            io(&tmp, fs::remove_dir_all(&tmp))?;
        }
        io(&tmp, fs::create_dir_all(&tmp))?;
        Ok(Self {
            tmp,
            target: target.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.tmp.join(rel);
        if let Some(dir) = path.parent() {
            io(dir, fs::create_dir_all(dir))?;
        }
        io(&path, fs::write(&path, bytes))?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn finish<C: Serialize>(mut self, kind: &str, config: &C, config_digest: String) -> Result<Manifest> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let m = Manifest {
            kind: kind.into(),
            config_digest,
            config: serde_json::to_value(config).expect("config serializes"),
            files: std::mem::take(&mut self.files),
        };
        let path = self.tmp.join(MANIFEST);
        io(&path, fs::write(&path, m.to_json()))?;
        if self.target.exists() {
            io(&self.target, fs::remove_dir_all(&self.target))?;
        }
        io(&self.target, fs::rename(&self.tmp, &self.target))?;
        Ok(m)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.tmp.exists() {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Scene suite and sensor timing of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub count: usize,
    pub seed: u64,
    pub knobs: SceneKnobs,
    pub timing: SampleTiming,
    /// Dimension of the rendered stand-in image features.
    pub raw_dim: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            count: 4,
            seed: 0,
            knobs: SceneKnobs::default(),
            timing: SampleTiming::default(),
            raw_dim: 64,
        }
    }
}

fn scene_file(i: usize) -> String {
    format!("scenes/{i:04}.json")
}

fn scan_file(i: usize, k: usize) -> String {
    format!("scans/{i:04}_{k:02}.bin")
}

fn image_file(i: usize, k: usize) -> String {
    format!("images/{i:04}_{k:02}.bin")
}

/// Simulates `cfg.count` scenes into `out`. Scans are stored once per
/// distinct time of [`SampleTiming::scan_times`]; images once per future time.
pub fn run_simulate(cfg: &SimulateConfig, out: &Path) -> Result<Manifest> {
    cfg.timing.validate()?;
    if cfg.raw_dim < 4 {
        return Err(PipelineError::Config("raw_dim must be at least 4".into()));
    }
    let mut st = Staging::new(out)?;
    let times = cfg.timing.scan_times();
    let future = cfg.timing.future_times();
    for i in 0..cfg.count {
        let scene = generate_scene(cfg.seed, i as u64, &cfg.knobs);
        st.write(&scene_file(i), scene.to_json().as_bytes())?;
        for (k, &t) in times.iter().enumerate() {
            st.write(&scan_file(i, k), &format::scan_to_bytes(&scan_at(&scene, t)?))?;
        }
        for (k, &t) in future.iter().enumerate() {
            st.write(&image_file(i, k), &format::image_to_bytes(&image_at(&scene, t, cfg.raw_dim)?))?;
        }
    }
    st.finish("dataset", cfg, config_digest(cfg, &[]))
}

/// A simulated dataset on disk.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub config: SimulateConfig,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir, "dataset")?;
        let config = manifest.config(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.config.count
    }

    pub fn is_empty(&self) -> bool {
        self.config.count == 0
    }

    pub fn scene(&self, i: usize) -> Result<Scene> {
        let bytes = self.manifest.read(&self.dir, &scene_file(i))?;
        Ok(Scene::from_json(&String::from_utf8_lossy(&bytes))?)
    }

    pub fn images(&self, i: usize) -> Result<Vec<FeatureImage>> {
        (0..self.config.timing.future_times().len())
            .map(|k| Ok(format::image_from_bytes(&self.manifest.read(&self.dir, &image_file(i, k))?)?))
            .collect()
    }

    pub fn scene_data(&self, i: usize) -> Result<SceneData> {
        let times = self.config.timing.scan_times();
        let scans: Vec<LidarScan> = (0..times.len())
            .map(|k| Ok(format::scan_from_bytes(&self.manifest.read(&self.dir, &scan_file(i, k))?)?))
            .collect::<Result<_>>()?;
        let pick = |ts: Vec<f64>| -> Vec<LidarScan> {
            ts.iter()
                .map(|t| scans[times.iter().position(|x| x == t).expect("time listed")].clone())
                .collect()
        };
        Ok(SceneData {
            scene: self.scene(i)?,
            past: pick(self.config.timing.past_times()),
            future: pick(self.config.timing.future_times()),
            images: self.images(i)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenQueriesConfig {
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub pca_dim: usize,
    pub pca_subset: usize,
    pub seed: u64,
}

impl Default for GenQueriesConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::default(),
            pca_dim: crate::pca::DEFAULT_COMPONENTS,
            pca_subset: crate::pca::DEFAULT_FIT_SUBSET,
            seed: 0,
        }
    }
}

fn sample_file(i: usize, ext: &str) -> String {
    format!("samples/{i:04}.{ext}")
}

/// Pixels of every image of the dataset, visited scene by scene so only one
/// scene's images are held at a time.
fn fit_pca_streaming(ds: &Dataset, cfg: &GenQueriesConfig) -> Result<PcaModel> {
    let mut images = Vec::new();
    let mut total = 0;
    let per_scene: Vec<usize> = (0..ds.len())
        .map(|i| {
            let imgs = ds.images(i)?;
            let n = imgs.iter().map(|im| im.width * im.height).sum();
            total += n;
            Ok(n)
        })
        .collect::<Result<_>>()?;
    let mut rng = RayRng::new(cfg.seed, Domain::PcaSubset, 0);
    let picks = choose_sorted(&mut rng, total, cfg.pca_subset.min(total));
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(picks.len());
    let (mut offset, mut k) = (0, 0);
    for (i, &n) in per_scene.iter().enumerate() {
        if k < picks.len() && picks[k] < offset + n {
            images = ds.images(i)?;
        }
        let mut local = offset;
        for img in &images {
            let m = img.width * img.height;
            while k < picks.len() && picks[k] < local + m && picks[k] < offset + n {
                let px = picks[k] - local;
                samples.push(img.feature(px % img.width, px / img.width).to_vec());
                k += 1;
            }
            local += m;
        }
        images.clear();
        offset += n;
    }
    Ok(fit_pca(&samples, cfg.pca_dim)?)
}

/// One query set per dataset scene, plus the shared feature reduction.
pub fn run_genqueries(cfg: &GenQueriesConfig, dataset: &Path, out: &Path) -> Result<Manifest> {
    cfg.sampler.validate()?;
    let ds = Dataset::open(dataset)?;
    if ds.is_empty() {
        return Err(PipelineError::Config("dataset has no scenes".into()));
    }
    let pca = fit_pca_streaming(&ds, cfg)?;
    let mut st = Staging::new(out)?;
    st.write("pca.bin", &pca.to_bytes())?;
    for i in 0..ds.len() {
        let data = ds.scene_data(i)?;
        let sampler = SamplerConfig {
            seed: sample_seed(cfg.seed, i),
            ..cfg.sampler
        };
        let s = build_sample(&data, &ds.config.timing, &pca, &sampler, &cfg.augment)
            .map_err(|source| PipelineError::Sample { index: i, source })?;
        st.write(&sample_file(i, "qset"), &s.queries.to_bytes())?;
        st.write(&sample_file(i, "input"), &format::input_to_bytes(&s.input))?;
        let meta = serde_json::to_string_pretty(&s.meta).expect("meta serializes") + "\n";
        st.write(&sample_file(i, "meta.json"), meta.as_bytes())?;
    }
    let digest = config_digest(cfg, &[&ds.manifest.config_digest]);
    st.finish("queries", &QueriesRecord { count: ds.len(), genqueries: cfg.clone(), dataset: ds.config }, digest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueriesRecord {
    pub count: usize,
    pub genqueries: GenQueriesConfig,
    pub dataset: SimulateConfig,
}

/// Generated query sets on disk.
pub struct QueriesDir {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub record: QueriesRecord,
}

impl QueriesDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir, "queries")?;
        let record = manifest.config(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            record,
        })
    }

    pub fn pca(&self) -> Result<PcaModel> {
        Ok(PcaModel::from_bytes(&self.manifest.read(&self.dir, "pca.bin")?)?)
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        let queries = QuerySet::from_bytes(&self.manifest.read(&self.dir, &sample_file(i, "qset"))?)?;
        let input: EncoderInput = format::input_from_bytes(&self.manifest.read(&self.dir, &sample_file(i, "input"))?)?;
        let meta_path = self.dir.join(sample_file(i, "meta.json"));
        let meta: SampleMeta = parse_json(&meta_path, &String::from_utf8_lossy(&self.manifest.read(&self.dir, &sample_file(i, "meta.json"))?))?;
        Ok(Sample { input, queries, meta })
    }

    /// The first `n` samples (all when `None`).
    pub fn samples(&self, n: Option<usize>) -> Result<Vec<Sample>> {
        let n = n.unwrap_or(self.record.count);
        if n > self.record.count {
            return Err(PipelineError::Config(format!(
                "asked for {n} samples but only {} exist",
                self.record.count
            )));
        }
        (0..n).map(|i| self.sample(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainStageConfig {
    pub field: FieldConfig,
    pub train: TrainConfig,
    /// Train on the first `n` samples only.
    pub max_samples: Option<usize>,
}

impl Default for TrainStageConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::default(),
            train: TrainConfig {
                total_steps: 500,
                ..TrainConfig::default()
            },
            max_samples: None,
        }
    }
}

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const BEST: &str = "best.bin";
pub const LOSS_CSV: &str = "loss.csv";

fn check_field_fits(field: &FieldConfig, feature_dim: usize, past: usize) -> Result<()> {
    if field.feature_dim != feature_dim {
        return Err(PipelineError::Incompatible(format!(
            "field feature_dim {} but query features have {feature_dim}",
            field.feature_dim
        )));
    }
    if past > field.past_scans {
        return Err(PipelineError::Incompatible(format!(
            "{past} past scans but the encoder takes {}",
            field.past_scans
        )));
    }
    Ok(())
}

fn train_csv(history: &[TrainRecord]) -> String {
    let mut s = String::from(TrainRecord::CSV_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Trains on the queries in `queries`, writing the final and best
/// checkpoints and the loss history. With `resume`, continues from the
/// checkpoint already in `out`.
pub fn run_train(
    cfg: &TrainStageConfig,
    queries: &Path,
    out: &Path,
    resume: bool,
) -> Result<(Manifest, Vec<TrainRecord>)> {
    let q = QueriesDir::open(queries)?;
    let digest = config_digest(cfg, &[&q.manifest.config_digest]);
    check_field_fits(&cfg.field, q.record.genqueries.pca_dim, q.record.dataset.timing.past_offsets.len())?;
    let data = q.samples(cfg.max_samples)?;
    let mut prior_best = None;
    let (params, adam, mut history) = if resume && out.join(CHECKPOINT).exists() {
        let ck = Checkpoint::from_bytes(&read_bytes(&out.join(CHECKPOINT))?)?;
        if ck.config_digest != digest {
            return Err(PipelineError::DigestMismatch {
                expected: digest,
                got: ck.config_digest,
            });
        }
        let start = ck.adam.as_ref().map_or(0, |a| a.step);
        let mut prior = read_history(&out.join(LOSS_CSV))?;
        prior.retain(|r| r.step <= start);
        if out.join(BEST).exists() {
            prior_best = Some(Checkpoint::from_bytes(&read_bytes(&out.join(BEST))?)?.params);
        }
        (ck.params, ck.adam, prior)
    } else {
        (FieldParams::init(cfg.field, cfg.train.mode, cfg.train.seed)?, None, Vec::new())
    };
    let outcome = train(params, adam, &data, &cfg.train)?;
    // The best parameters of the earlier segment win ties, as within a run.
    let min_loss = |h: &[TrainRecord]| h.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
    let best = match prior_best {
        Some(p) if min_loss(&history) <= min_loss(&outcome.history) => p,
        _ => outcome.best,
    };
    history.extend_from_slice(&outcome.history);
    let mut st = Staging::new(out)?;
    let final_ck = Checkpoint {
        params: outcome.params,
        adam: Some(outcome.adam),
        config_digest: digest.clone(),
    };
    st.write(CHECKPOINT, &final_ck.to_bytes())?;
    let best = Checkpoint {
        params: best,
        adam: None,
        config_digest: digest.clone(),
    };
    st.write(BEST, &best.to_bytes())?;
    st.write(LOSS_CSV, train_csv(&history).as_bytes())?;
    Ok((st.finish("train", cfg, digest)?, history))
}

fn read_history(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = io(path, fs::read_to_string(path))?;
    let bad = || PipelineError::Manifest {
        path: path.to_path_buf(),
        msg: "malformed loss history".into(),
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(TrainRecord {
                step: f[0].parse().map_err(|_| bad())?,
                lr: num(f[1])?,
                total: num(f[2])?,
                occ: num(f[3])?,
                dino: num(f[4])?,
                ego: num(f[5])?,
            })
        })
        .collect()
}

/// Minimum scores the evaluation must reach; unset thresholds always pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub r_at_p70: Option<f64>,
    pub oracle_r_at_p70: Option<f64>,
    pub ap_occ: Option<f64>,
    pub ap_ego: Option<f64>,
}

impl Thresholds {
    /// Names of the failed checks.
    pub fn failures(&self, r: &EvalReport) -> Vec<&'static str> {
        let checks = [
            ("r_at_p70", self.r_at_p70, r.r_at_p70),
            ("oracle_r_at_p70", self.oracle_r_at_p70, r.oracle.r_at_p),
            ("ap_occ", self.ap_occ, r.ap_occ),
            ("ap_ego", self.ap_ego, r.ap_ego),
        ];
        checks
            .into_iter()
            .filter(|(_, min, got)| min.is_some_and(|m| !got.is_some_and(|g| g >= m)))
            .map(|(n, _, _)| n)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalStageConfig {
    pub grid: EvalGrid,
    pub ego: EgoEvalConfig,
    pub precision_target: f64,
    pub timing: SampleTiming,
    pub thresholds: Thresholds,
    pub write_rasters: bool,
}

impl Default for EvalStageConfig {
    fn default() -> Self {
        Self {
            grid: EvalGrid::default(),
            ego: EgoEvalConfig::default(),
            precision_target: crate::eval::DEFAULT_PRECISION,
            timing: SampleTiming::default(),
            thresholds: Thresholds::default(),
            write_rasters: true,
        }
    }
}

/// Simulates evaluation scenes from stored scene descriptions.
pub fn eval_scenes(scenes: Vec<Scene>, cfg: &EvalStageConfig) -> Result<Vec<EvalScene>> {
    scenes
        .into_iter()
        .map(|s| Ok(EvalScene::simulate(s, cfg.timing.t0, &cfg.timing.past_offsets, &cfg.grid)?))
        .collect()
}

pub fn evaluate(params: &FieldParams, scenes: &[EvalScene], cfg: &EvalStageConfig, digest: String) -> Result<(EvalReport, crate::eval::EgoEval)> {
    check_field_fits(&params.config, params.config.feature_dim, cfg.timing.past_offsets.len())?;
    let occ = eval_4d_occupancy(params, scenes, &cfg.grid, cfg.precision_target)?;
    let ego = eval_ego_path(params, scenes, &cfg.ego)?;
    Ok((EvalReport::new(digest, occ, &ego, cfg.precision_target), ego))
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub manifest: Manifest,
    pub failures: Vec<&'static str>,
}

/// Evaluates `checkpoint` on every scene of the dataset at `scenes`. The
/// checkpoint's digest must match the manifest of its training run unless
/// `force` is set.
pub fn run_eval(cfg: &EvalStageConfig, checkpoint: &Path, scenes: &Path, out: &Path, force: bool) -> Result<EvalOutcome> {
    cfg.grid.validate()?;
    let ck = Checkpoint::from_bytes(&read_bytes(checkpoint)?)?;
    let train_dir = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    match Manifest::load(train_dir, "train") {
        Ok(m) if m.config_digest != ck.config_digest && !force => {
            return Err(PipelineError::DigestMismatch {
                expected: m.config_digest,
                got: ck.config_digest,
            })
        }
        Err(e) if !force => return Err(e),
        _ => {}
    }
    let ds = Dataset::open(scenes)?;
    let list = (0..ds.len()).map(|i| ds.scene(i)).collect::<Result<Vec<_>>>()?;
    let sims = eval_scenes(list, cfg)?;
    let digest = config_digest(cfg, &[&ck.config_digest, &ds.manifest.config_digest]);
    let (report, ego) = evaluate(&ck.params, &sims, cfg, digest.clone())?;
    let mut st = Staging::new(out)?;
    st.write("report.json", (report.to_json() + "\n").as_bytes())?;
    if cfg.write_rasters {
        for (i, (p, l)) in ego.rasters.iter().zip(&ego.label_rasters).enumerate() {
            st.write(&format!("rasters/ego_{i:04}.pgm"), &p.to_pgm())?;
            st.write(&format!("rasters/ego_{i:04}_label.pgm"), &l.to_pgm())?;
        }
    }
    let failures = cfg.thresholds.failures(&report);
    let manifest = st.finish("eval", cfg, digest)?;
    Ok(EvalOutcome {
        report,
        manifest,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainStageConfig,
    pub eval: EvalStageConfig,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            counts: vec![1, 4, 16, 64],
            seeds: vec![0, 1, 2],
            train: TrainStageConfig::default(),
            eval: EvalStageConfig {
                write_rasters: false,
                ..EvalStageConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub samples: usize,
    pub seed: u64,
    pub r_at_p70: Option<f64>,
    pub oracle_r_at_p70: Option<f64>,
    pub ap_ego: Option<f64>,
}

impl ScalingRow {
    pub const CSV_HEADER: &'static str = "samples,seed,r_at_p70,oracle_r_at_p70,ap_ego";

    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.samples,
            self.seed,
            f(self.r_at_p70),
            f(self.oracle_r_at_p70),
            f(self.ap_ego)
        )
    }
}

/// Trains once per (sample count, seed) on prefixes of `samples` and
/// evaluates each run on `scenes`.
pub fn scaling_rows(
    cfg: &ScalingConfig,
    samples: &[Sample],
    scenes: &[EvalScene],
    mut progress: impl FnMut(&ScalingRow),
) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &n in &cfg.counts {
            if n == 0 || n > samples.len() {
                return Err(PipelineError::Config(format!(
                    "sample count {n} outside 1..={}",
                    samples.len()
                )));
            }
            let tc = TrainConfig {
                seed,
                mode: Mode::Amortized,
                ..cfg.train.train
            };
            let params = FieldParams::init(cfg.train.field, Mode::Amortized, seed)?;
            let outcome = train(params, None::<AdamState>, &samples[..n], &tc)?;
            let (r, _) = evaluate(&outcome.params, scenes, &cfg.eval, String::new())?;
            let row = ScalingRow {
                samples: n,
                seed,
                r_at_p70: r.r_at_p70,
                oracle_r_at_p70: r.oracle.r_at_p,
                ap_ego: r.ap_ego,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Sample-count sweep from a query directory, evaluated on the held-out
/// scenes at `scenes`; writes `scaling.csv` and `scaling.json`.
pub fn run_scaling(
    cfg: &ScalingConfig,
    queries: &Path,
    scenes: &Path,
    out: &Path,
    progress: impl FnMut(&ScalingRow),
) -> Result<(Manifest, Vec<ScalingRow>)> {
    let q = QueriesDir::open(queries)?;
    check_field_fits(&cfg.train.field, q.record.genqueries.pca_dim, q.record.dataset.timing.past_offsets.len())?;
    let max = cfg.counts.iter().copied().max().unwrap_or(0);
    let samples = q.samples(Some(max))?;
    let ds = Dataset::open(scenes)?;
    let list = (0..ds.len()).map(|i| ds.scene(i)).collect::<Result<Vec<_>>>()?;
    let sims = eval_scenes(list, &cfg.eval)?;
    let rows = scaling_rows(cfg, &samples, &sims, progress)?;
    let mut st = Staging::new(out)?;
    let mut csv = String::from(ScalingRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    st.write("scaling.csv", csv.as_bytes())?;
    st.write("scaling.json", (serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n").as_bytes())?;
    let digest = config_digest(cfg, &[&q.manifest.config_digest, &ds.manifest.config_digest]);
    Ok((st.finish("scaling", cfg, digest)?, rows))
}

/// Per-seed check of the scaling table: scores non-decreasing in sample
/// count and the largest count beating the smallest by `min_gain`.
pub fn scaling_holds(rows: &[ScalingRow], seed: u64, min_gain: f64) -> bool {
    let mut r: Vec<(usize, f64)> = rows
        .iter()
        .filter(|x| x.seed == seed)
        .map(|x| (x.samples, x.oracle_r_at_p70.unwrap_or(0.0)))
        .collect();
    r.sort_by_key(|x| x.0);
    if r.len() < 2 {
        return false;
    }
    r.windows(2).all(|w| w[1].1 >= w[0].1) && r[r.len() - 1].1 - r[0].1 >= min_gain
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sim(count: usize) -> SimulateConfig {
        let mut cfg = SimulateConfig {
            count,
            seed: 5,
            raw_dim: 8,
            ..SimulateConfig::default()
        };
        cfg.knobs.max_boxes = 3;
        cfg
    }

    fn shrink(scene: &mut Scene) {
        let p = &mut scene.sensors.lidar.pattern;
        p.azimuth_count = 90;
        p.elevation_count = 8;
        let c = &mut scene.sensors.camera.intrinsics;
        *c = crate::scene::Intrinsics {
            width: 24,
            height: 16,
            fx: 12.0,
            fy: 12.0,
            cx: 12.0,
            cy: 8.0,
        };
    }

    #[test]
    fn timing_times() {
        let t = SampleTiming::default();
        assert_eq!(t.past_times(), vec![0.0, 0.5, 1.0]);
        assert_eq!(t.future_times(), vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]);
        assert_eq!(t.scan_times().len(), 9);
    }

    #[test]
    fn digest_depends_on_upstream() {
        let c = SimulateConfig::default();
        assert_eq!(config_digest(&c, &[]), config_digest(&c, &[]));
        assert_ne!(config_digest(&c, &[]), config_digest(&c, &["x"]));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let m = run_simulate(&tiny_sim(0), &out).unwrap();
        assert!(m.files.is_empty());
        let ds = Dataset::open(&out).unwrap();
        assert!(ds.is_empty());
        assert!(run_genqueries(&GenQueriesConfig::default(), &out, &dir.path().join("q")).is_err());
    }

    #[test]
    fn tampered_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        run_simulate(&tiny_sim(1), &out).unwrap();
        let ds = Dataset::open(&out).unwrap();
        assert!(ds.scene(0).is_ok());
        fs::write(out.join(scene_file(0)), b"{}").unwrap();
        assert!(matches!(ds.scene(0), Err(PipelineError::Manifest { .. })));
    }

    #[test]
    fn staging_refuses_foreign_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep.txt"), b"x").unwrap();
        assert!(Staging::new(dir.path()).is_err());
        assert!(dir.path().join("keep.txt").exists());
    }

    #[test]
    fn pca_subset_reads_requested_pixels() {
        let mut scene = generate_scene(1, 0, &SceneKnobs::default());
        shrink(&mut scene);
        let data = simulate_scene_data(scene, &SampleTiming::default(), 8).unwrap();
        let all = fit_dataset_pca(data.images.iter(), 4, usize::MAX, 0).unwrap();
        let pixels: Vec<&[f64]> = data
            .images
            .iter()
            .flat_map(|im| (0..im.width * im.height).map(move |p| im.feature(p % im.width, p / im.width)))
            .collect();
        let direct = fit_pca(&pixels, 4).unwrap();
        assert_eq!(all, direct);
    }

    #[test]
    fn sample_round_trips_through_disk() {
        let mut scene = generate_scene(2, 0, &SceneKnobs::default());
        shrink(&mut scene);
        let timing = SampleTiming::default();
        let data = simulate_scene_data(scene, &timing, 8).unwrap();
        let pca = fit_dataset_pca(data.images.iter(), 4, 2000, 0).unwrap();
        let sampler = SamplerConfig {
            n_occ_pos: 200,
            n_occ_neg: 200,
            n_feat: 50,
            n_ego_pos: 20,
            n_ego_neg: 20,
            ..SamplerConfig::default()
        };
        let s = build_sample(&data, &timing, &pca, &sampler, &AugmentConfig::default()).unwrap();
        assert_eq!(s.input.scans.len(), 3);
        let back = format::input_from_bytes(&format::input_to_bytes(&s.input)).unwrap();
        assert_eq!(back, s.input);
    }

    #[test]
    fn threshold_failures() {
        let r = EvalReport {
            config_digest: String::new(),
            r_at_p70: Some(0.4),
            ap_occ: None,
            soft_iou: None,
            ap_ego: Some(0.9),
            per_time_breakdown: vec![],
            probe_counts: Default::default(),
            precision_target: 0.7,
            oracle: Default::default(),
            label_agreement: None,
            ego_base_rate: 0.1,
        };
        let t = Thresholds {
            r_at_p70: Some(0.5),
            ap_ego: Some(0.8),
            ap_occ: Some(0.1),
            ..Thresholds::default()
        };
        assert_eq!(t.failures(&r), vec!["r_at_p70", "ap_occ"]);
        assert!(Thresholds::default().failures(&r).is_empty());
    }

    #[test]
    fn scaling_rule() {
        let row = |samples, v| ScalingRow {
            samples,
            seed: 0,
            r_at_p70: None,
            oracle_r_at_p70: Some(v),
            ap_ego: None,
        };
        assert!(scaling_holds(&[row(1, 0.1), row(4, 0.1), row(64, 0.2)], 0, 0.05));
        assert!(!scaling_holds(&[row(1, 0.1), row(4, 0.3), row(64, 0.2)], 0, 0.05));
        assert!(!scaling_holds(&[row(1, 0.1), row(64, 0.12)], 0, 0.05));
    }
}
