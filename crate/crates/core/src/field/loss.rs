use super::decoder::{head_backward, head_forward, head_input, interp_weights, sigmoid_pub, HeadCache};
use super::encoder::{encode_backward, encode_forward, pillar_histogram, EncoderCache};
use super::{FieldError, FieldParams, Head, Mode};
use crate::par;
use crate::query::{EncoderInput, Query, Target};
use serde::{Deserialize, Serialize};

/// Queries are processed in fixed-size chunks whose partial results are
/// summed in chunk order, so results do not depend on the worker count.
const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Each term is averaged over its own queries.
    PerTerm,
    /// Every term is divided by the total number of queries.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub occ: f64,
    pub dino: f64,
    pub ego: f64,
    pub averaging: Averaging,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            occ: 1.0,
            dino: 0.5,
            ego: 0.1,
            averaging: Averaging::PerTerm,
        }
    }
}

/// Weighted total plus the unweighted mean of each term (0 when absent).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub occ: f64,
    pub dino: f64,
    pub ego: f64,
}

/// One encoder input with the queries drawn from it for this step.
#[derive(Debug, Clone)]
pub struct StepItem<'a> {
    pub input: &'a EncoderInput,
    pub queries: Vec<&'a Query>,
}

/// `max(l, 0) - l y + ln(1 + exp(-|l|))`.
fn bce(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

struct Scales {
    occ: f64,
    dino: f64,
    ego: f64,
}

fn counts(items: &[StepItem]) -> [usize; 3] {
    let mut n = [0; 3];
    for it in items {
        for q in &it.queries {
            n[head_of(q) as usize] += 1;
        }
    }
    n
}

fn head_of(q: &Query) -> Head {
    match q.target {
        Target::Occupancy(_) => Head::Occupancy,
        Target::Feature(_) => Head::Feature,
        Target::Ego(_) => Head::Ego,
    }
}

fn scales(n: [usize; 3], w: &LossWeights) -> Scales {
    let per = |lambda: f64, k: usize| if k == 0 { 0.0 } else { lambda / k as f64 };
    match w.averaging {
        Averaging::PerTerm => Scales {
            occ: per(w.occ, n[0]),
            dino: per(w.dino, n[1]),
            ego: per(w.ego, n[2]),
        },
        Averaging::Global => {
            let total = n.iter().sum();
            Scales {
                occ: per(w.occ, total),
                dino: per(w.dino, total),
                ego: per(w.ego, total),
            }
        }
    }
}

struct ChunkResult {
    sums: [f64; 3],
    head_grad: Vec<f64>,
    dz: Vec<f64>,
}

/// Per-query loss of one head output, and the output gradient scaled by `s`.
fn query_loss(q: &Query, out: &[f64], s: &Scales, d: usize) -> Result<(f64, Vec<f64>), FieldError> {
    Ok(match &q.target {
        Target::Occupancy(y) | Target::Ego(y) => {
            let y = *y as f64;
            let scale = if matches!(q.target, Target::Occupancy(_)) { s.occ } else { s.ego };
            (bce(out[0], y), vec![scale * (sigmoid_pub(out[0]) - y)])
        }
        Target::Feature(t) => {
            if t.len() != d {
                return Err(FieldError::FeatureDim {
                    expected: d,
                    got: t.len(),
                });
            }
            let l1 = out.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / d as f64;
            let g = out
                .iter()
                .zip(t)
                .map(|(a, b)| {
                    let r = a - b;
                    let sign = if r > 0.0 {
                        1.0
                    } else if r < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    s.dino * sign / d as f64
                })
                .collect();
            (l1, g)
        }
    })
}

fn run(
    p: &FieldParams,
    items: &[StepItem],
    w: &LossWeights,
    want_grad: bool,
) -> Result<(LossTerms, Vec<f64>), FieldError> {
    let n = counts(items);
    let s = scales(n, w);
    let cfg = &p.config;
    let c = cfg.grid.channels;
    let head_start = p.layout.heads[0].w1.start;
    let mut grad = if want_grad { vec![0.0; p.len()] } else { Vec::new() };
    let mut sums = [0.0; 3];
    for item in items {
        let cache: Option<EncoderCache> = match p.mode {
            Mode::Amortized => Some(encode_forward(p, pillar_histogram(cfg, item.input)?)),
            Mode::FitPerScene => None,
        };
        let z: &[f64] = match &cache {
            Some(cache) => &cache.z,
            None => &p.values[p.layout.grid.clone()],
        };
        let chunks = item.queries.len().div_ceil(CHUNK);
        let results = par::map_indexed(chunks, |ci| -> Result<ChunkResult, FieldError> {
            let mut r = ChunkResult {
                sums: [0.0; 3],
                head_grad: if want_grad { vec![0.0; p.len() - head_start] } else { Vec::new() },
                dz: if want_grad { vec![0.0; z.len()] } else { Vec::new() },
            };
            let mut hc = HeadCache::default();
            for q in &item.queries[ci * CHUNK..((ci + 1) * CHUNK).min(item.queries.len())] {
                let head = head_of(q);
                let l = &p.layout.heads[head as usize];
                let corners = interp_weights(&cfg.grid, q.position.x, q.position.y)?;
                head_forward(&p.values, l, head_input(cfg, z, &corners, q.position.z, q.time), &mut hc);
                let (value, dout) = query_loss(q, &hc.out, &s, cfg.feature_dim)?;
                r.sums[head as usize] += value;
                if want_grad {
                    let dx = head_backward(&p.values, l, &hc, &dout, &mut r.head_grad, head_start);
                    for k in &corners {
                        if k.weight == 0.0 {
                            continue;
                        }
                        for (g, &d) in r.dz[k.cell * c..(k.cell + 1) * c].iter_mut().zip(&dx[..c]) {
                            *g += k.weight * d;
                        }
                    }
                }
            }
            Ok(r)
        });
        let mut dz = if want_grad { vec![0.0; z.len()] } else { Vec::new() };
        for r in results {
            let r = r?;
            for k in 0..3 {
                sums[k] += r.sums[k];
            }
            if want_grad {
                for (g, v) in grad[head_start..].iter_mut().zip(&r.head_grad) {
                    *g += v;
                }
                for (g, v) in dz.iter_mut().zip(&r.dz) {
                    *g += v;
                }
            }
        }
        if want_grad {
            match &cache {
                Some(cache) => encode_backward(p, cache, &dz, &mut grad),
                None => {
                    for (g, v) in grad[p.layout.grid.clone()].iter_mut().zip(&dz) {
                        *g += v;
                    }
                }
            }
        }
    }
    let mean = |k: usize| if n[k] == 0 { 0.0 } else { sums[k] / n[k] as f64 };
    let total = match w.averaging {
        Averaging::PerTerm => w.occ * mean(0) + w.dino * mean(1) + w.ego * mean(2),
        Averaging::Global => {
            let all = n.iter().sum::<usize>().max(1) as f64;
            (w.occ * sums[0] + w.dino * sums[1] + w.ego * sums[2]) / all
        }
    };
    let terms = LossTerms {
        total,
        occ: mean(0),
        dino: mean(1),
        ego: mean(2),
    };
    Ok((terms, grad))
}

/// Weighted loss over every query of every item.
pub fn batch_loss(p: &FieldParams, items: &[StepItem], w: &LossWeights) -> Result<LossTerms, FieldError> {
    Ok(run(p, items, w, false)?.0)
}

/// Loss of a single query batch decoded from `input`.
pub fn loss(p: &FieldParams, input: &EncoderInput, batch: &[Query], w: &LossWeights) -> Result<LossTerms, FieldError> {
    batch_loss(
        p,
        &[StepItem {
            input,
            queries: batch.iter().collect(),
        }],
        w,
    )
}

/// Loss and its exact gradient with respect to every parameter.
pub fn backward(p: &FieldParams, items: &[StepItem], w: &LossWeights) -> Result<(LossTerms, Vec<f64>), FieldError> {
    run(p, items, w, true)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::field::encoder::encode;
    use crate::field::tests::tiny_config;
    use crate::field::FieldConfig;
    use crate::geom::Vec3;
    use crate::query::SourceTag;
    use crate::rng::{Domain, RayRng};

    pub(crate) fn random_batch(cfg: &FieldConfig, seed: u64, n: usize) -> Vec<Query> {
        let mut rng = RayRng::new(seed, Domain::Generic, 7);
        let g = cfg.grid;
        (0..n)
            .map(|i| {
                let position = Vec3::new(
                    rng.range(g.x_range.0, g.x_range.1),
                    rng.range(g.y_range.0, g.y_range.1),
                    rng.range(-1.0, 3.0),
                );
                let time = rng.range(0.0, 3.0);
                let (target, tag) = match i % 3 {
                    0 => (Target::Occupancy(rng.below(2) as u8), SourceTag::RayPositive),
                    1 => (Target::Feature((0..cfg.feature_dim).map(|_| rng.range(-1.0, 1.0)).collect()), SourceTag::Feature),
                    _ => (Target::Ego(rng.below(2) as u8), SourceTag::EgoPositive),
                };
                Query {
                    position,
                    time,
                    target,
                    tag,
                }
            })
            .collect()
    }

    pub(crate) fn random_input(cfg: &FieldConfig, seed: u64) -> EncoderInput {
        let mut rng = RayRng::new(seed, Domain::Generic, 8);
        let g = cfg.grid;
        EncoderInput {
            scans: (0..cfg.past_scans)
                .map(|_| {
                    (0..30)
                        .map(|_| Vec3::new(rng.range(g.x_range.0, g.x_range.1), rng.range(g.y_range.0, g.y_range.1), rng.range(-0.5, 2.0)))
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn zero_logit_single_query_is_ln2() {
        let p = FieldParams::zeros(tiny_config(), Mode::FitPerScene).unwrap();
        let q = Query::occupancy(Vec3::zeros(), 0.0, 1, SourceTag::RayPositive);
        let w = LossWeights {
            occ: 1.0,
            dino: 0.0,
            ego: 0.0,
            averaging: Averaging::PerTerm,
        };
        let l = loss(&p, &EncoderInput::default(), &[q], &w).unwrap();
        assert!((l.total - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!((l.dino, l.ego), (0.0, 0.0));
    }

    #[test]
    fn exact_feature_gives_zero_dino() {
        let p = FieldParams::init(tiny_config(), Mode::FitPerScene, 1).unwrap();
        let z = encode(&p, &EncoderInput::default()).unwrap();
        let out = p.query_head(&z, [0.3, 0.2, 1.0, 1.0], Head::Feature).unwrap();
        let q = Query {
            position: Vec3::new(0.3, 0.2, 1.0),
            time: 1.0,
            target: Target::Feature(out),
            tag: SourceTag::Feature,
        };
        let l = loss(&p, &EncoderInput::default(), &[q], &LossWeights::default()).unwrap();
        assert_eq!(l.dino, 0.0);
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn matches_scalar_oracle() {
        let cfg = tiny_config();
        for seed in 0..4 {
            let p = FieldParams::init(cfg, Mode::Amortized, seed).unwrap();
            let input = random_input(&cfg, seed);
            let batch = random_batch(&cfg, seed, 300);
            for averaging in [Averaging::PerTerm, Averaging::Global] {
                let w = LossWeights {
                    averaging,
                    ..LossWeights::default()
                };
                let got = loss(&p, &input, &batch, &w).unwrap().total;
                // Independent per-query loop using the public query interface.
                let z = encode(&p, &input).unwrap();
                let (mut so, mut sd, mut se, mut no, mut nd, mut ne) = (0.0, 0.0, 0.0, 0, 0, 0);
                for q in &batch {
                    let out = p.query(&z, [q.position.x, q.position.y, q.position.z, q.time]).unwrap();
                    match &q.target {
                        Target::Occupancy(y) => {
                            let pr = 1.0 / (1.0 + (-out.occ_logit).exp());
                            so += -(*y as f64 * pr.ln() + (1.0 - *y as f64) * (1.0 - pr).ln());
                            no += 1;
                        }
                        Target::Ego(y) => {
                            let pr = 1.0 / (1.0 + (-out.ego_logit).exp());
                            se += -(*y as f64 * pr.ln() + (1.0 - *y as f64) * (1.0 - pr).ln());
                            ne += 1;
                        }
                        Target::Feature(t) => {
                            sd += out.feature.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64;
                            nd += 1;
                        }
                    }
                }
                let expected = match averaging {
                    Averaging::PerTerm => 1.0 * so / no as f64 + 0.5 * sd / nd as f64 + 0.1 * se / ne as f64,
                    Averaging::Global => (1.0 * so + 0.5 * sd + 0.1 * se) / batch.len() as f64,
                };
                assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
            }
        }
    }

    #[test]
    fn single_term_isolation() {
        let cfg = tiny_config();
        let p = FieldParams::init(cfg, Mode::Amortized, 3).unwrap();
        let input = random_input(&cfg, 3);
        let batch = random_batch(&cfg, 3, 60);
        let all = loss(&p, &input, &batch, &LossWeights { occ: 1.0, dino: 1.0, ego: 1.0, averaging: Averaging::PerTerm }).unwrap();
        let only = |o: f64, d: f64, e: f64| loss(&p, &input, &batch, &LossWeights { occ: o, dino: d, ego: e, averaging: Averaging::PerTerm }).unwrap().total;
        assert_eq!(only(1.0, 0.0, 0.0), all.occ);
        assert_eq!(only(0.0, 1.0, 0.0), all.dino);
        assert_eq!(only(0.0, 0.0, 1.0), all.ego);
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let cfg = tiny_config();
        let p = FieldParams::init(cfg, Mode::Amortized, 3).unwrap();
        let input = random_input(&cfg, 3);
        let batch = random_batch(&cfg, 3, 60);
        let w = LossWeights {
            occ: 0.0,
            dino: 0.0,
            ego: 0.0,
            averaging: Averaging::PerTerm,
        };
        let items = [StepItem {
            input: &input,
            queries: batch.iter().collect(),
        }];
        let (_, g) = backward(&p, &items, &w).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_encoder_matches_per_scene() {
        let cfg = tiny_config();
        let p = FieldParams::init(cfg, Mode::Amortized, 9).unwrap();
        let input = random_input(&cfg, 9);
        let batch = random_batch(&cfg, 9, 90);
        let z = encode(&p, &input).unwrap();
        let q = p.with_fixed_grid(&z).unwrap();
        let a = loss(&p, &input, &batch, &LossWeights::default()).unwrap();
        let b = loss(&q, &EncoderInput::default(), &batch, &LossWeights::default()).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn stable_bce_at_extremes() {
        assert!(bce(800.0, 1.0).abs() < 1e-300);
        assert!((bce(-800.0, 1.0) - 800.0).abs() < 1e-9);
        assert!(bce(-800.0, 0.0).is_finite());
    }

    #[test]
    fn out_of_region_query_errors() {
        let p = FieldParams::zeros(tiny_config(), Mode::FitPerScene).unwrap();
        let q = Query::occupancy(Vec3::new(50.0, 0.0, 0.0), 0.0, 1, SourceTag::RayPositive);
        assert!(matches!(
            loss(&p, &EncoderInput::default(), &[q], &LossWeights::default()),
            Err(FieldError::OutOfRegion { .. })
        ));
    }
}
