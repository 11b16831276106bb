//! Counter-based random streams keyed by `(seed, domain, index)`.
//!
//! Every ray (or point, or training step) owns an independent ChaCha8
//! stream, so results never depend on worker count or iteration order.

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Separates the streams used by different consumers of the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Generic = 0,
    OccNegative = 1,
    OccPositive = 2,
    Feature = 3,
    FeatureSubsample = 4,
    EgoPositive = 5,
    EgoNegative = 6,
    MissingRay = 7,
    Rotation = 8,
    Scene = 9,
    Init = 10,
    BatchSample = 11,
    BatchQuery = 12,
    PcaSubset = 13,
}

#[derive(Debug, Clone)]
pub struct RayRng {
    inner: ChaCha8Rng,
}

impl RayRng {
    pub fn new(seed: u64, domain: Domain, index: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
        key[16..24].copy_from_slice(b"occ4dkey");
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(index);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's widening multiply with rejection.
        let zone = n.wrapping_neg() % n;
        loop {
            let m = (self.inner.next_u64() as u128) * (n as u128);
            if (m as u64) >= zone {
                return (m >> 64) as u64;
            }
        }
    }
}

/// Stream for ray `ray_index` under `seed`.
pub fn per_ray_rng(seed: u64, ray_index: u64) -> RayRng {
    RayRng::new(seed, Domain::Generic, ray_index)
}

/// Picks `k` distinct indices out of `0..n`, returned in ascending order.
pub fn choose_sorted(rng: &mut RayRng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let mut a = per_ray_rng(42, 7);
        let mut b = per_ray_rng(42, 7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn adjacent_rays_differ() {
        let draw8 = |i| {
            let mut r = per_ray_rng(42, i);
            (0..8).map(|_| r.uniform()).collect::<Vec<_>>()
        };
        for i in 0..50 {
            assert_ne!(draw8(i), draw8(i + 1));
        }
        let mut d = RayRng::new(42, Domain::OccNegative, 3);
        let mut e = RayRng::new(42, Domain::OccPositive, 3);
        assert_ne!(d.next_u64(), e.next_u64());
    }

    #[test]
    fn uniform_passes_ks() {
        let n = 100_000;
        let mut r = per_ray_rng(9, 0);
        let mut xs: Vec<f64> = (0..n).map(|_| r.uniform()).collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let hi = (i + 1) as f64 / n as f64 - x;
                let lo = x - i as f64 / n as f64;
                hi.max(lo)
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS statistic {ks}");
        assert!(xs[0] >= 0.0 && xs[n - 1] < 1.0);
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut r = per_ray_rng(1, 1);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let v = r.below(7) as usize;
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn choose_sorted_distinct() {
        let mut r = per_ray_rng(3, 0);
        let c = choose_sorted(&mut r, 100, 10);
        assert_eq!(c.len(), 10);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(choose_sorted(&mut r, 5, 10), vec![0, 1, 2, 3, 4]);
    }
}
