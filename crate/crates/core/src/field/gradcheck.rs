use super::loss::{backward, batch_loss, LossWeights, StepItem};
use super::{FieldError, FieldParams};
use crate::rng::{choose_sorted, Domain, RayRng};

/// Agreement of analytic and central-difference gradients on one section.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionCheck {
    pub name: String,
    pub checked: usize,
    /// `|a - n| / max(|a|, |n|)` over the checked coordinates, as norms.
    pub rel_err: f64,
}

/// Compares the analytic gradient with central differences of step `h` on
/// up to `per_section` coordinates of every named parameter section.
pub fn gradient_check(
    p: &FieldParams,
    items: &[StepItem],
    w: &LossWeights,
    per_section: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<SectionCheck>, FieldError> {
    let (_, grad) = backward(p, items, w)?;
    let mut probe = p.clone();
    let mut out = Vec::new();
    for (k, (name, range)) in p.layout.sections().into_iter().enumerate() {
        let mut rng = RayRng::new(seed, Domain::Generic, k as u64);
        let picks = choose_sorted(&mut rng, range.len(), per_section.min(range.len()));
        let (mut diff, mut an, mut nu) = (0.0, 0.0, 0.0);
        for i in picks.iter().map(|&i| range.start + i) {
            let v = p.values[i];
            probe.values[i] = v + h;
            let up = batch_loss(&probe, items, w)?.total;
            probe.values[i] = v - h;
            let down = batch_loss(&probe, items, w)?.total;
            probe.values[i] = v;
            let numeric = (up - down) / (2.0 * h);
            diff += (grad[i] - numeric).powi(2);
            an += grad[i] * grad[i];
            nu += numeric * numeric;
        }
        let scale = an.sqrt().max(nu.sqrt());
        out.push(SectionCheck {
            name,
            checked: picks.len(),
            rel_err: if scale == 0.0 { 0.0 } else { diff.sqrt() / scale },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::loss::tests::{random_batch, random_input};
    use crate::field::tests::tiny_config;
    use crate::field::{Averaging, Mode};

    fn check(mode: Mode, averaging: Averaging, seed: u64) {
        let cfg = tiny_config();
        let mut p = FieldParams::init(cfg, mode, seed).unwrap();
        // A non-zero grid and biases so every section sees a gradient.
        let mut rng = RayRng::new(seed, Domain::Generic, 99);
        for v in &mut p.values {
            *v += rng.range(-0.1, 0.1);
        }
        let input = random_input(&cfg, seed);
        let batch = random_batch(&cfg, seed, 60);
        let items = [StepItem {
            input: &input,
            queries: batch.iter().collect(),
        }];
        let w = LossWeights {
            averaging,
            ..LossWeights::default()
        };
        let res = gradient_check(&p, &items, &w, 40, 1e-6, seed).unwrap();
        assert!(!res.is_empty());
        for s in res {
            assert!(s.rel_err < 1e-5, "{} rel err {}", s.name, s.rel_err);
        }
    }

    #[test]
    fn amortized_gradients() {
        for seed in 0..3 {
            check(Mode::Amortized, Averaging::PerTerm, seed);
        }
        check(Mode::Amortized, Averaging::Global, 7);
    }

    #[test]
    fn per_scene_gradients() {
        check(Mode::FitPerScene, Averaging::PerTerm, 3);
    }
}
