use super::loss::{backward, Averaging, LossWeights, StepItem};
use super::{FieldError, FieldParams, Mode};
use crate::query::{Query, Sample, Target};
use crate::rng::{Domain, RayRng};
use serde::{Deserialize, Serialize};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Linear warmup to `lr_max`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Learning rate of 1-based `step`.
pub fn learning_rate(s: &Schedule, step: usize) -> f64 {
    if step < s.warmup_steps {
        return s.lr_max * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps).max(1) as f64;
    let progress = ((step - s.warmup_steps) as f64 / span).min(1.0);
    s.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub step: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step(values: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);
    for i in 0..values.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        values[i] -= lr * mh / (vh.sqrt() + EPS);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_occ: f64,
    pub lambda_dino: f64,
    pub lambda_ego: f64,
    pub averaging: Averaging,
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Samples drawn per step.
    pub samples_per_step: usize,
    /// Queries of each kind drawn (with replacement) per sample per step.
    pub occ_per_step: usize,
    pub feat_per_step: usize,
    pub ego_per_step: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_occ: 1.0,
            lambda_dino: 0.5,
            lambda_ego: 0.1,
            averaging: Averaging::PerTerm,
            lr_max: 4e-4,
            warmup_steps: 100,
            total_steps: 2000,
            samples_per_step: 1,
            occ_per_step: 512,
            feat_per_step: 128,
            ego_per_step: 64,
            seed: 0,
            mode: Mode::Amortized,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            occ: self.lambda_occ,
            dino: self.lambda_dino,
            ego: self.lambda_ego,
            averaging: self.averaging,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr_max: self.lr_max,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::Config(m.into()));
        if [self.lambda_occ, self.lambda_dino, self.lambda_ego].iter().any(|&l| !(l >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if self.total_steps == 0 || self.samples_per_step == 0 {
            return bad("total_steps and samples_per_step must be positive");
        }
        if !(self.lr_max > 0.0) {
            return bad("lr_max must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub occ: f64,
    pub dino: f64,
    pub ego: f64,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "step,lr,total,occ,dino,ego";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.total, self.occ, self.dino, self.ego
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FieldParams,
    pub best: FieldParams,
    pub best_step: usize,
    pub adam: AdamState,
    pub history: Vec<TrainRecord>,
}

struct Pools<'a> {
    occ: Vec<&'a Query>,
    feat: Vec<&'a Query>,
    ego: Vec<&'a Query>,
}

fn pools(s: &Sample) -> Pools<'_> {
    let mut p = Pools {
        occ: Vec::new(),
        feat: Vec::new(),
        ego: Vec::new(),
    };
    for q in &s.queries.queries {
        match q.target {
            Target::Occupancy(_) => p.occ.push(q),
            Target::Feature(_) => p.feat.push(q),
            Target::Ego(_) => p.ego.push(q),
        }
    }
    p
}

fn draw<'a>(rng: &mut RayRng, pool: &[&'a Query], k: usize, out: &mut Vec<&'a Query>) {
    if pool.is_empty() {
        return;
    }
    for _ in 0..k {
        out.push(pool[rng.below(pool.len() as u64) as usize]);
    }
}

/// Optimizes `params` on `dataset` until `cfg.total_steps`, continuing from
/// `adam` when resuming. Batches depend only on `(seed, step)`.
pub fn train(
    params: FieldParams,
    adam: Option<AdamState>,
    dataset: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, FieldError> {
    train_until(params, adam, dataset, cfg, cfg.total_steps)
}

/// Like [`train`] but stops after step `until` while keeping the schedule of
/// the full run, so a later call resumes exactly.
pub fn train_until(
    params: FieldParams,
    adam: Option<AdamState>,
    dataset: &[Sample],
    cfg: &TrainConfig,
    until: usize,
) -> Result<TrainOutcome, FieldError> {
    cfg.validate()?;
    let until = until.min(cfg.total_steps);
    if dataset.is_empty() {
        return Err(FieldError::EmptyDataset);
    }
    if params.mode != cfg.mode {
        return Err(FieldError::Config("parameter mode differs from training mode".into()));
    }
    let mut adam = adam.unwrap_or_else(|| AdamState::new(params.len()));
    if adam.m.len() != params.len() {
        return Err(FieldError::ParamLength {
            expected: params.len(),
            got: adam.m.len(),
        });
    }
    let pools: Vec<Pools> = dataset.iter().map(pools).collect();
    let weights = cfg.weights();
    let schedule = cfg.schedule();
    let mut params = params;
    let mut best = params.clone();
    let mut best_step = adam.step;
    let mut best_loss = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.total_steps.saturating_sub(adam.step));
    let s = cfg.samples_per_step as u64;
    for step in adam.step + 1..=until {
        let items: Vec<StepItem> = (0..s)
            .map(|b| {
                let key = (step as u64 - 1) * s + b;
                let idx = RayRng::new(cfg.seed, Domain::BatchSample, key).below(dataset.len() as u64) as usize;
                let mut rng = RayRng::new(cfg.seed, Domain::BatchQuery, key);
                let mut queries = Vec::with_capacity(cfg.occ_per_step + cfg.feat_per_step + cfg.ego_per_step);
                draw(&mut rng, &pools[idx].occ, cfg.occ_per_step, &mut queries);
                draw(&mut rng, &pools[idx].feat, cfg.feat_per_step, &mut queries);
                draw(&mut rng, &pools[idx].ego, cfg.ego_per_step, &mut queries);
                StepItem {
                    input: &dataset[idx].input,
                    queries,
                }
            })
            .collect();
        let (terms, grads) = backward(&params, &items, &weights)?;
        if !terms.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(FieldError::Diverged { step });
        }
        if terms.total < best_loss {
            best_loss = terms.total;
            best.values.copy_from_slice(&params.values);
            best_step = step - 1;
        }
        let lr = learning_rate(&schedule, step);
        adam_step(&mut params.values, &grads, &mut adam, lr);
        history.push(TrainRecord {
            step,
            lr,
            total: terms.total,
            occ: terms.occ,
            dino: terms.dino,
            ego: terms.ego,
        });
    }
    Ok(TrainOutcome {
        params,
        best,
        best_step,
        adam,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::loss::tests::{random_batch, random_input};
    use crate::field::tests::tiny_config;
    use crate::query::{QuerySet, SampleMeta, SourceTag};

    #[test]
    fn first_adam_step_closed_form() {
        let mut w = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step(&mut w, &[2.0], &mut st, 0.1);
        assert!((w[0] - (1.0 - 0.1 * (2.0 / (2.0 + 1e-8)))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut w = vec![0.3, -2.0];
        let mut st = AdamState::new(2);
        for _ in 0..50 {
            adam_step(&mut w, &[0.0, 0.0], &mut st, 0.1);
        }
        assert_eq!(w, vec![0.3, -2.0]);
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            lr_max: 4e-4,
            warmup_steps: 100,
            total_steps: 2000,
        };
        assert!((learning_rate(&s, 100) - 4e-4).abs() < 1e-12);
        assert!(learning_rate(&s, 2000) < 1e-6 * 4e-4);
        assert!((learning_rate(&s, 50) - 2e-4).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in 100..=2000 {
            let lr = learning_rate(&s, k);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn sample(seed: u64) -> Sample {
        let cfg = tiny_config();
        Sample {
            input: random_input(&cfg, seed),
            queries: QuerySet {
                feature_dim: cfg.feature_dim,
                queries: random_batch(&cfg, seed, 90),
            },
            meta: SampleMeta {
                seed,
                theta: 0.0,
                counts: [0; 6],
                exhausted: vec![],
            },
        }
    }

    fn small_cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            total_steps: 30,
            warmup_steps: 5,
            lr_max: 1e-2,
            occ_per_step: 16,
            feat_per_step: 8,
            ego_per_step: 8,
            mode,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn duplicated_dataset_gives_identical_curve() {
        let p = FieldParams::init(tiny_config(), Mode::Amortized, 1).unwrap();
        let one = vec![sample(4)];
        let dup = vec![sample(4), sample(4), sample(4)];
        let cfg = small_cfg(Mode::Amortized);
        let a = train(p.clone(), None, &one, &cfg).unwrap();
        let b = train(p, None, &dup, &cfg).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn runs_are_bit_identical_and_resumable() {
        let p = FieldParams::init(tiny_config(), Mode::FitPerScene, 1).unwrap();
        let data = vec![sample(1), sample(2)];
        let cfg = small_cfg(Mode::FitPerScene);
        let a = train(p.clone(), None, &data, &cfg).unwrap();
        let b = train(p.clone(), None, &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        let first = train_until(p, None, &data, &cfg, 12).unwrap();
        assert_eq!(first.adam.step, 12);
        let rest = train(first.params, Some(first.adam), &data, &cfg).unwrap();
        assert_eq!(rest.params, a.params);
        assert_eq!(&a.history[12..], &rest.history[..]);
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut p = FieldParams::init(tiny_config(), Mode::FitPerScene, 1).unwrap();
        let r = p.layout.heads[0].b3.clone();
        p.values[r].fill(f64::NAN);
        let cfg = small_cfg(Mode::FitPerScene);
        assert_eq!(
            train(p, None, &[sample(1)], &cfg).unwrap_err(),
            FieldError::Diverged { step: 1 }
        );
    }

    #[test]
    fn tiny_problem_converges_to_a_stationary_point() {
        let mut p = FieldParams::init(tiny_config(), Mode::FitPerScene, 2).unwrap();
        // Coincident queries with opposite labels: the minimum sits at logit 0.
        let at = crate::geom::Vec3::new(0.5, 0.5, 1.0);
        let queries = [
            Query::occupancy(at, 1.0, 1, SourceTag::RayPositive),
            Query::occupancy(at, 1.0, 0, SourceTag::RayNegative),
        ];
        let input = Default::default();
        let items = [StepItem {
            input: &input,
            queries: queries.iter().collect(),
        }];
        let w = LossWeights::default();
        for _ in 0..2000 {
            let (_, g) = backward(&p, &items, &w).unwrap();
            for (v, gi) in p.values.iter_mut().zip(&g) {
                *v -= 0.5 * gi;
            }
        }
        let (l, g) = backward(&p, &items, &w).unwrap();
        assert!((l.total - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-8);
    }
}
