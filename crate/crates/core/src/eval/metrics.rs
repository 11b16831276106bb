//! Ranking metrics over (score, label) pairs. Thresholds are the distinct
//! scores; a pair is predicted positive when its score is at or above the
//! threshold.

use super::EvalError;

/// One operating point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<usize, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    Ok(labels.iter().filter(|&&l| l).count())
}

/// Operating points in order of loosening threshold (descending score),
/// with tied scores grouped into one point.
pub fn threshold_sweep(scores: &[f64], labels: &[bool]) -> Result<Vec<SweepPoint>, EvalError> {
    check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<SweepPoint> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push(SweepPoint {
                threshold: scores[i],
                tp,
                fp,
            });
        }
    }
    Ok(out)
}

fn precision(p: &SweepPoint) -> f64 {
    p.tp as f64 / (p.tp + p.fp) as f64
}

/// Best recall among thresholds whose precision reaches `target`, with the
/// loosest such threshold. `(0, +inf)` when no threshold qualifies.
pub fn recall_at_precision(scores: &[f64], labels: &[bool], target: f64) -> Result<(f64, f64), EvalError> {
    let pos = check(scores, labels)?;
    if pos == 0 || pos == labels.len() {
        return Err(EvalError::Degenerate("need at least one positive and one negative"));
    }
    let mut best = (0.0, f64::INFINITY);
    let mut prev_recall = 0.0;
    for p in threshold_sweep(scores, labels)? {
        let recall = p.tp as f64 / pos as f64;
        debug_assert!(recall >= prev_recall);
        prev_recall = recall;
        if precision(&p) >= target {
            best = (recall, p.threshold);
        }
    }
    Ok(best)
}

/// Step-interpolated area under the precision-recall curve.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let pos = check(scores, labels)?;
    if pos == 0 {
        return Err(EvalError::Degenerate("no positives"));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for p in threshold_sweep(scores, labels)? {
        let recall = p.tp as f64 / pos as f64;
        ap += (recall - prev) * precision(&p);
        prev = recall;
    }
    Ok(ap)
}

/// `sum(p y) / (sum p + sum y - sum(p y))`; 1 when both sums vanish.
pub fn soft_iou(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check(scores, labels)?;
    if scores.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
        return Err(EvalError::ScoreRange);
    }
    let y = |l: bool| if l { 1.0 } else { 0.0 };
    let sp: f64 = scores.iter().sum();
    let sy: f64 = labels.iter().map(|&l| y(l)).sum();
    let spy: f64 = scores.iter().zip(labels).map(|(&s, &l)| s * y(l)).sum();
    let denom = sp + sy - spy;
    if denom == 0.0 {
        return Ok(if sp == 0.0 && sy == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(spy / denom)
}

/// Brute-force references: every candidate threshold is re-counted from
/// scratch, O(n^2).
pub mod oracle {
    use super::EvalError;

    fn thresholds(scores: &[f64]) -> Vec<f64> {
        let mut t = scores.to_vec();
        t.sort_by(|a, b| b.total_cmp(a));
        t.dedup();
        t
    }

    fn count(scores: &[f64], labels: &[bool], thr: f64) -> (usize, usize) {
        let mut tp = 0;
        let mut fp = 0;
        for i in 0..scores.len() {
            if scores[i] >= thr {
                if labels[i] {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        (tp, fp)
    }

    pub fn recall_at_precision(scores: &[f64], labels: &[bool], target: f64) -> Result<(f64, f64), EvalError> {
        let pos = labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == labels.len() {
            return Err(EvalError::Degenerate("need at least one positive and one negative"));
        }
        let mut best_recall = 0.0;
        let mut best_thr = f64::INFINITY;
        for thr in thresholds(scores) {
            let (tp, fp) = count(scores, labels, thr);
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / pos as f64;
            if precision >= target && (recall > best_recall || (recall == best_recall && thr < best_thr)) {
                best_recall = recall;
                best_thr = thr;
            }
        }
        if best_recall == 0.0 {
            // Zero recall carries no usable threshold.
            best_thr = f64::INFINITY;
        }
        Ok((best_recall, best_thr))
    }

    pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
        let pos = labels.iter().filter(|&&l| l).count();
        if pos == 0 {
            return Err(EvalError::Degenerate("no positives"));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for thr in thresholds(scores) {
            let (tp, fp) = count(scores, labels, thr);
            let recall = tp as f64 / pos as f64;
            ap += (recall - prev) * (tp as f64 / (tp + fp) as f64);
            prev = recall;
        }
        Ok(ap)
    }

    pub fn soft_iou(scores: &[f64], labels: &[bool]) -> f64 {
        let mut inter = 0.0;
        let mut sp = 0.0;
        let mut sy = 0.0;
        for i in 0..scores.len() {
            let y = if labels[i] { 1.0 } else { 0.0 };
            inter += scores[i] * y;
            sp += scores[i];
            sy += y;
        }
        if sp + sy - inter == 0.0 {
            return if sp == 0.0 && sy == 0.0 { 1.0 } else { 0.0 };
        }
        inter / (sp + sy - inter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, RayRng};
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let (r, thr) = recall_at_precision(&[0.9, 0.8, 0.1], &[true, true, false], 0.7).unwrap();
        assert_eq!((r, thr), (1.0, 0.8));
        let (r, thr) = recall_at_precision(&[0.5; 4], &[true, false, true, false], 0.7).unwrap();
        assert_eq!(r, 0.0);
        assert!(thr.is_infinite());
        assert_eq!(average_precision(&[0.9, 0.4], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.4, 0.9], &[true, false]).unwrap(), 0.5);
        assert_eq!(soft_iou(&[1.0, 0.0, 1.0], &[true, false, true]).unwrap(), 1.0);
        assert_eq!(soft_iou(&[1.0, 1.0, 0.0], &[true, false, false]).unwrap(), 0.5);
        assert_eq!(soft_iou(&[0.0, 0.0], &[false, false]).unwrap(), 1.0);
    }

    #[test]
    fn ap_can_fall_below_base_rate() {
        // Positives ranked last: 1/2 * 1/3 + 1/2 * 2/4.
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap();
        assert!((ap - 5.0 / 12.0).abs() < 1e-15);
        // Constant scores give exactly the base rate.
        assert_eq!(average_precision(&[0.3; 4], &[true, false, false, false]).unwrap(), 0.25);
    }

    #[test]
    fn errors() {
        assert!(matches!(recall_at_precision(&[0.1], &[true], 0.7), Err(EvalError::Degenerate(_))));
        assert!(matches!(average_precision(&[0.1], &[false]), Err(EvalError::Degenerate(_))));
        assert!(matches!(average_precision(&[f64::NAN], &[true]), Err(EvalError::NonFiniteScore)));
        assert!(matches!(soft_iou(&[1.5], &[true]), Err(EvalError::ScoreRange)));
        assert!(matches!(soft_iou(&[0.5], &[]), Err(EvalError::LengthMismatch { .. })));
    }

    fn instance(seed: u64, n: usize, levels: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = RayRng::new(seed, Domain::Generic, 0);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse levels force many ties.
        let scores = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        (scores, labels)
    }

    #[test]
    fn thousand_random_instances_match_oracles() {
        for seed in 0..1000u64 {
            let (s, l) = instance(seed, 2 + (seed % 60) as usize, 1 + seed % 20);
            let target = [0.5, 0.7, 0.9][seed as usize % 3];
            assert_eq!(recall_at_precision(&s, &l, target).unwrap(), oracle::recall_at_precision(&s, &l, target).unwrap());
            assert_eq!(average_precision(&s, &l).unwrap(), oracle::average_precision(&s, &l).unwrap());
            assert!((soft_iou(&s, &l).unwrap() - oracle::soft_iou(&s, &l)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn bounds(seed in 0u64..10_000, n in 2usize..80) {
            let (s, l) = instance(seed, n, 1 + seed % 50);
            let ap = average_precision(&s, &l).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
            let (r, _) = recall_at_precision(&s, &l, 0.7).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            let iou = soft_iou(&s, &l).unwrap();
            prop_assert!((0.0..=1.0).contains(&iou));
        }

        #[test]
        fn recall_never_drops_as_threshold_loosens(seed in 0u64..10_000, n in 1usize..80) {
            let (s, l) = instance(seed, n.max(2), 7);
            let sweep = threshold_sweep(&s, &l).unwrap();
            for w in sweep.windows(2) {
                prop_assert!(w[1].tp >= w[0].tp && w[1].threshold < w[0].threshold);
            }
        }
    }
}
