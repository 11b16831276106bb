//! Continuous 4D field: a pillar encoder producing a BEV grid, three MLP
//! heads decoded at bilinearly interpolated grid features, the training
//! loss with analytic gradients, and an Adam training loop.

mod decoder;
mod encoder;
mod gradcheck;
mod loss;
mod train;

pub use decoder::{fourier_features, interp_weights, Head, HeadOutput};
pub use encoder::{encode, pillar_histogram};
pub use gradcheck::{gradient_check, SectionCheck};
pub use loss::{backward, batch_loss, loss, Averaging, LossTerms, LossWeights, StepItem};
pub use train::{
    adam_step, learning_rate, train, train_until, AdamState, Schedule, TrainConfig, TrainOutcome, TrainRecord,
};

use crate::format::{self, FormatError, Reader, Writer};
use crate::rng::{Domain, RayRng};
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FieldError {
    #[error("query ({x}, {y}) lies outside the grid region")]
    OutOfRegion { x: f64, y: f64 },
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("invalid field config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{got} past scans but the encoder takes at most {max}")]
    TooManyScans { got: usize, max: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("feature target has {got} components, expected {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// BEV grid over `[x_range] x [y_range]` with `cells_x x cells_y` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub cells_x: usize,
    pub cells_y: usize,
    pub channels: usize,
}

impl GridSpec {
    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / self.cells_x as f64,
            (self.y_range.1 - self.y_range.0) / self.cells_y as f64,
        )
    }

    pub fn cells(&self) -> usize {
        self.cells_x * self.cells_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub grid: GridSpec,
    pub hidden: usize,
    pub feature_dim: usize,
    pub past_scans: usize,
    /// Height range mapped to `[0, 1]` before the Fourier encoding.
    pub z_range: (f64, f64),
    pub t_max: f64,
    pub fourier_freqs: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec {
                x_range: (-16.0, 16.0),
                y_range: (-16.0, 16.0),
                cells_x: 64,
                cells_y: 64,
                channels: 32,
            },
            hidden: 64,
            feature_dim: 16,
            past_scans: 3,
            z_range: (-1.0, 4.0),
            t_max: 3.0,
            fourier_freqs: 4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let g = &self.grid;
        let bad = |m: &str| Err(FieldError::Config(m.into()));
        if g.cells_x < 2 || g.cells_y < 2 || g.channels == 0 {
            return bad("grid needs at least 2x2 cells and one channel");
        }
        if !(g.x_range.0 < g.x_range.1 && g.y_range.0 < g.y_range.1) {
            return bad("grid ranges must be ordered");
        }
        if self.hidden == 0 || self.past_scans == 0 {
            return bad("hidden width and past scan count must be positive");
        }
        if !(self.z_range.0 < self.z_range.1) || !(self.t_max > 0.0) {
            return bad("z_range must be ordered and t_max positive");
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        2 * self.past_scans
    }

    pub fn head_input(&self) -> usize {
        self.grid.channels + 4 * self.fourier_freqs
    }

    pub fn head_output(&self, head: Head) -> usize {
        match head {
            Head::Occupancy | Head::Ego => 1,
            Head::Feature => self.feature_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// The grid itself is the learnable parameter.
    FitPerScene,
    /// The grid is produced by the encoder from past scans.
    Amortized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Offsets of every named section within the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub embed_w: Range<usize>,
    pub embed_b: Range<usize>,
    pub conv1_w: Range<usize>,
    pub conv1_b: Range<usize>,
    pub conv2_w: Range<usize>,
    pub conv2_b: Range<usize>,
    pub grid: Range<usize>,
    pub heads: [HeadLayout; 3],
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &FieldConfig, mode: Mode) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let c = cfg.grid.channels;
        let amortized = mode == Mode::Amortized;
        let enc = |n: usize| if amortized { n } else { 0 };
        let embed_w = take(enc(c * cfg.input_channels()));
        let embed_b = take(enc(c));
        let conv1_w = take(enc(c * 9 * c));
        let conv1_b = take(enc(c));
        let conv2_w = take(enc(c * 9 * c));
        let conv2_b = take(enc(c));
        let grid = take(if amortized { 0 } else { cfg.grid.cells() * c });
        let mut head = |h: Head| {
            let (i, n, o) = (cfg.head_input(), cfg.hidden, cfg.head_output(h));
            HeadLayout {
                w1: take(n * i),
                b1: take(n),
                w2: take(n * n),
                b2: take(n),
                w3: take(o * n),
                b3: take(o),
                input: i,
                hidden: n,
                output: o,
            }
        };
        let heads = [head(Head::Occupancy), head(Head::Feature), head(Head::Ego)];
        Self {
            embed_w,
            embed_b,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            grid,
            heads,
            len: at,
        }
    }

    /// Named non-empty sections in storage order.
    pub fn sections(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("encoder.embed.weight".to_string(), self.embed_w.clone()),
            ("encoder.embed.bias".to_string(), self.embed_b.clone()),
            ("encoder.conv1.weight".to_string(), self.conv1_w.clone()),
            ("encoder.conv1.bias".to_string(), self.conv1_b.clone()),
            ("encoder.conv2.weight".to_string(), self.conv2_w.clone()),
            ("encoder.conv2.bias".to_string(), self.conv2_b.clone()),
            ("grid".to_string(), self.grid.clone()),
        ];
        for (h, l) in Head::ALL.iter().zip(&self.heads) {
            let n = h.name();
            out.push((format!("{n}.l1.weight"), l.w1.clone()));
            out.push((format!("{n}.l1.bias"), l.b1.clone()));
            out.push((format!("{n}.l2.weight"), l.w2.clone()));
            out.push((format!("{n}.l2.bias"), l.b2.clone()));
            out.push((format!("{n}.l3.weight"), l.w3.clone()));
            out.push((format!("{n}.l3.bias"), l.b3.clone()));
        }
        out.retain(|(_, r)| !r.is_empty());
        out
    }
}

/// All learnable parameters of a field, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub mode: Mode,
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl FieldParams {
    pub fn zeros(config: FieldConfig, mode: Mode) -> Result<Self, FieldError> {
        config.validate()?;
        let layout = Layout::new(&config, mode);
        Ok(Self {
            config,
            mode,
            values: vec![0.0; layout.len],
            layout,
        })
    }

    /// Weights from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases and a zero grid.
    pub fn init(config: FieldConfig, mode: Mode, seed: u64) -> Result<Self, FieldError> {
        let mut p = Self::zeros(config, mode)?;
        let l = p.layout.clone();
        let c = config.grid.channels;
        let mut weights: Vec<(Range<usize>, usize)> = vec![
            (l.embed_w.clone(), config.input_channels()),
            (l.conv1_w.clone(), 9 * c),
            (l.conv2_w.clone(), 9 * c),
        ];
        for h in &l.heads {
            weights.push((h.w1.clone(), h.input));
            weights.push((h.w2.clone(), h.hidden));
            weights.push((h.w3.clone(), h.hidden));
        }
        for (k, (range, fan_in)) in weights.into_iter().enumerate() {
            let mut rng = RayRng::new(seed, Domain::Init, k as u64);
            let a = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.values[range] {
                *v = rng.range(-a, a);
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .sections()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| &self.values[r])
    }

    /// Copy of these decoder heads driven by a fixed grid `z` in per-scene mode.
    pub fn with_fixed_grid(&self, z: &[f64]) -> Result<FieldParams, FieldError> {
        let mut p = FieldParams::zeros(self.config, Mode::FitPerScene)?;
        if z.len() != p.layout.grid.len() {
            return Err(FieldError::ParamLength {
                expected: p.layout.grid.len(),
                got: z.len(),
            });
        }
        p.values[p.layout.grid.clone()].copy_from_slice(z);
        let src = self.layout.heads[0].w1.start;
        let dst = p.layout.heads[0].w1.start;
        let n = self.values.len() - src;
        p.values[dst..dst + n].copy_from_slice(&self.values[src..]);
        Ok(p)
    }
}

/// Serialized training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: FieldParams,
    pub adam: Option<AdamState>,
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config_digest: String,
    field: FieldConfig,
    mode: Mode,
}

impl Checkpoint {
    /// Header JSON, then `(name, f64 values)` per section, then optional Adam
    /// moments and step counter.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(format::CHECKPOINT_MAGIC, 0);
        let head = CheckpointHeader {
            config_digest: self.config_digest.clone(),
            field: self.params.config,
            mode: self.params.mode,
        };
        w.bytes(serde_json::to_string(&head).expect("header serializes").as_bytes());
        let sections = self.params.layout.sections();
        w.u64(sections.len() as u64);
        for (name, r) in sections {
            w.bytes(name.as_bytes());
            w.u64(r.len() as u64);
            w.f64s(&self.params.values[r]);
        }
        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.step as u64);
                w.f64s(&a.m);
                w.f64s(&a.v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FieldError> {
        let (mut r, _) = Reader::with_header(bytes, format::CHECKPOINT_MAGIC)?;
        let head: CheckpointHeader = serde_json::from_slice(r.bytes()?)
            .map_err(|e| FormatError::Corrupt(format!("checkpoint header: {e}")))?;
        let mut params = FieldParams::zeros(head.field, head.mode)?;
        let sections = params.layout.sections();
        if r.u64()? as usize != sections.len() {
            return Err(FormatError::Corrupt("section count".into()).into());
        }
        for (name, range) in sections {
            let got = r.bytes()?;
            if got != name.as_bytes() {
                return Err(FormatError::Corrupt(format!("expected section {name}")).into());
            }
            if r.u64()? as usize != range.len() {
                return Err(FormatError::Corrupt(format!("section {name} length")).into());
            }
            let v = r.f64s(range.len())?;
            params.values[range].copy_from_slice(&v);
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()? as usize;
                let m = r.f64s(params.len())?;
                let v = r.f64s(params.len())?;
                Some(AdamState { m, v, step })
            }
            f => return Err(FormatError::Corrupt(format!("adam flag {f}")).into()),
        };
        r.expect_end()?;
        Ok(Self {
            params,
            adam,
            config_digest: head.config_digest,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> FieldConfig {
        FieldConfig {
            grid: GridSpec {
                x_range: (-4.0, 4.0),
                y_range: (-3.0, 3.0),
                cells_x: 4,
                cells_y: 3,
                channels: 3,
            },
            hidden: 5,
            feature_dim: 2,
            past_scans: 2,
            z_range: (-1.0, 3.0),
            t_max: 3.0,
            fourier_freqs: 2,
        }
    }

    #[test]
    fn layout_is_contiguous() {
        for mode in [Mode::FitPerScene, Mode::Amortized] {
            let l = Layout::new(&tiny_config(), mode);
            let s = l.sections();
            let mut at = 0;
            for (_, r) in &s {
                assert_eq!(r.start, at);
                at = r.end;
            }
            assert_eq!(at, l.len);
        }
        let amort = Layout::new(&tiny_config(), Mode::Amortized);
        assert!(amort.grid.is_empty());
        assert_eq!(amort.conv1_w.len(), 3 * 9 * 3);
        let per = Layout::new(&tiny_config(), Mode::FitPerScene);
        assert!(per.conv1_w.is_empty());
        assert_eq!(per.grid.len(), 4 * 3 * 3);
    }

    #[test]
    fn init_ranges() {
        let p = FieldParams::init(tiny_config(), Mode::Amortized, 3).unwrap();
        let a = 1.0 / (9.0f64 * 3.0).sqrt();
        assert!(p.section("encoder.conv1.weight").unwrap().iter().all(|v| v.abs() <= a));
        assert!(p.section("encoder.conv1.bias").unwrap().iter().all(|&v| v == 0.0));
        assert!(p.section("occupancy.l1.weight").unwrap().iter().any(|&v| v != 0.0));
        let q = FieldParams::init(tiny_config(), Mode::FitPerScene, 3).unwrap();
        assert!(q.section("grid").unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(p, FieldParams::init(tiny_config(), Mode::Amortized, 3).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = FieldParams::init(tiny_config(), Mode::Amortized, 1).unwrap();
        let n = p.len();
        let ck = Checkpoint {
            params: p,
            adam: Some(AdamState {
                m: vec![0.5; n],
                v: vec![0.25; n],
                step: 7,
            }),
            config_digest: "abc".into(),
        };
        let b = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    }
}
