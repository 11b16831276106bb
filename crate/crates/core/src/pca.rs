//! Principal component reduction of raw per-pixel features.
//!
//! Components come from a cyclic Jacobi eigendecomposition of the sample
//! covariance. Each component is sign-normalized so its largest-magnitude
//! entry is positive, which makes fitting deterministic.

use crate::format::{self, FormatError, Reader, Writer};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PcaError {
    #[error("need more than {d} samples, got {got}")]
    TooFewSamples { d: usize, got: usize },
    #[error("requested {requested} components but raw dimension is {raw}")]
    DimensionTooLarge { requested: usize, raw: usize },
    #[error("covariance has rank {achieved}, below the requested {requested}")]
    RankDeficient { achieved: usize, requested: usize },
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub const DEFAULT_COMPONENTS: usize = 16;
/// Size of the randomly drawn fitting subset.
pub const DEFAULT_FIT_SUBSET: usize = 50_000;

const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d x raw_dim`, row-major, orthonormal rows.
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn d(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn raw_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let n = self.raw_dim();
        &self.components[i * n..(i + 1) * n]
    }

    /// `components * (v - mean)`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, PcaError> {
        if v.len() != self.raw_dim() {
            return Err(PcaError::DimensionMismatch {
                expected: self.raw_dim(),
                got: v.len(),
            });
        }
        Ok((0..self.d())
            .map(|i| {
                self.component(i)
                    .iter()
                    .zip(v.iter().zip(&self.mean))
                    .map(|(c, (x, m))| c * (x - m))
                    .sum()
            })
            .collect())
    }

    /// `mean + componentsᵀ * y`.
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>, PcaError> {
        if y.len() != self.d() {
            return Err(PcaError::DimensionMismatch {
                expected: self.d(),
                got: y.len(),
            });
        }
        let mut out = self.mean.clone();
        for (i, &yi) in y.iter().enumerate() {
            for (o, c) in out.iter_mut().zip(self.component(i)) {
                *o += yi * c;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(format::PCA_MAGIC, 0);
        w.u64(self.d() as u64);
        w.u64(self.raw_dim() as u64);
        w.f64s(&self.mean);
        w.f64s(&self.components);
        w.f64s(&self.explained_variance);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (mut r, _) = Reader::with_header(bytes, format::PCA_MAGIC)?;
        let d = r.u64()? as usize;
        let raw = r.u64()? as usize;
        let mean = r.f64s(raw)?;
        let components = r.f64s(d * raw)?;
        let explained_variance = r.f64s(d)?;
        r.expect_end()?;
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// `a` is `n x n` row-major. Returns eigenvalues and eigenvectors (as
/// columns of a row-major `n x n` matrix), unsorted.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let diag_scale: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum::<f64>().max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum();
        if off <= 1e-32 * diag_scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Sample covariance (denominator `n - 1`) and mean.
pub fn covariance<S: AsRef<[f64]>>(samples: &[S]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let dim = samples[0].as_ref().len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s.as_ref()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for s in samples {
        for ((c, x), m) in centered.iter_mut().zip(s.as_ref()).zip(&mean) {
            *c = x - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            for j in i..dim {
                cov[i * dim + j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / denom;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    (mean, cov)
}

pub fn fit_pca<S: AsRef<[f64]>>(samples: &[S], d: usize) -> Result<PcaModel, PcaError> {
    if samples.len() <= d {
        return Err(PcaError::TooFewSamples {
            d,
            got: samples.len(),
        });
    }
    let raw = samples[0].as_ref().len();
    if d > raw {
        return Err(PcaError::DimensionTooLarge { requested: d, raw });
    }
    if let Some(bad) = samples.iter().find(|s| s.as_ref().len() != raw) {
        return Err(PcaError::DimensionMismatch {
            expected: raw,
            got: bad.as_ref().len(),
        });
    }
    let (mean, cov) = covariance(samples);
    let (vals, vecs) = jacobi_eigen(&cov, raw);
    let mut order: Vec<usize> = (0..raw).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let top = vals[order[0]].max(0.0);
    let tol = top * raw as f64 * 1e-12;
    let achieved = order.iter().filter(|&&i| vals[i] > tol).count();
    if achieved < d || top == 0.0 {
        return Err(PcaError::RankDeficient {
            achieved: if top == 0.0 { 0 } else { achieved },
            requested: d,
        });
    }
    let mut components = Vec::with_capacity(d * raw);
    let mut explained_variance = Vec::with_capacity(d);
    for &col in order.iter().take(d) {
        let mut row: Vec<f64> = (0..raw).map(|k| vecs[k * raw + col]).collect();
        let lead = row
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            row.iter_mut().for_each(|x| *x = -*x);
        }
        components.extend(row);
        explained_variance.push(vals[col].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

/// Mean squared reconstruction residual `‖x − reconstruct(project(x))‖²`
/// scaled to match the `n − 1` covariance denominator.
pub fn projection_residual<S: AsRef<[f64]>>(model: &PcaModel, samples: &[S]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let x = s.as_ref();
            let r = model
                .reconstruct(&model.project(x).expect("dimension"))
                .expect("dimension");
            x.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum();
    total / (samples.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::per_ray_rng;
    use approx::assert_abs_diff_eq;

    fn gaussian(rng: &mut crate::rng::RayRng) -> f64 {
        let u1 = rng.uniform_open();
        let u2 = rng.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn line_y_equals_x() {
        let mut rng = per_ray_rng(1, 0);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let s = rng.range(-5.0, 5.0);
                vec![s, s]
            })
            .collect();
        let err = fit_pca(&samples, 2).unwrap_err();
        assert_eq!(err, PcaError::RankDeficient { achieved: 1, requested: 2 });
        let m = fit_pca(&samples, 1).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(m.component(0)[0], h, epsilon = 1e-6);
        assert_abs_diff_eq!(m.component(0)[1], h, epsilon = 1e-6);
    }

    #[test]
    fn isotropic_cloud_has_flat_spectrum() {
        let mut rng = per_ray_rng(2, 0);
        let samples: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..4).map(|_| gaussian(&mut rng)).collect())
            .collect();
        let m = fit_pca(&samples, 4).unwrap();
        let (lo, hi) = (m.explained_variance[3], m.explained_variance[0]);
        assert!(hi / lo < 1.1, "spectrum {:?}", m.explained_variance);
    }

    #[test]
    fn project_examples() {
        let mut rng = per_ray_rng(3, 0);
        let samples: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..6).map(|k| gaussian(&mut rng) * (k + 1) as f64).collect())
            .collect();
        let m = fit_pca(&samples, 3).unwrap();
        let z = m.project(&m.mean).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let v: Vec<f64> = m.mean.iter().zip(m.component(0)).map(|(a, c)| a + 2.5 * c).collect();
        let y = m.project(&v).unwrap();
        assert_abs_diff_eq!(y[0], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 0.0, epsilon = 1e-12);
        let x: Vec<f64> = (0..6).map(|_| rng.range(-3.0, 3.0)).collect();
        let y1 = m.project(&x).unwrap();
        let y2 = m.project(&m.reconstruct(&y1).unwrap()).unwrap();
        for (a, b) in y1.iter().zip(&y2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        assert!(matches!(m.project(&[1.0]), Err(PcaError::DimensionMismatch { .. })));
    }

    #[test]
    fn invariants_and_sign_convention() {
        let mut rng = per_ray_rng(4, 0);
        let samples: Vec<Vec<f64>> = (0..800)
            .map(|_| (0..10).map(|k| gaussian(&mut rng) * (1.0 + k as f64 * 0.3)).collect())
            .collect();
        let m = fit_pca(&samples, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = m.component(i).iter().zip(m.component(j)).map(|(a, b)| a * b).sum();
                assert_abs_diff_eq!(dot, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-9);
            }
            let lead = m.component(i).iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(lead > 0.0);
        }
        assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(fit_pca(&samples, 5).unwrap(), m);
    }

    #[test]
    fn errors() {
        let few = vec![vec![1.0, 2.0]; 2];
        assert!(matches!(fit_pca(&few, 2), Err(PcaError::TooFewSamples { .. })));
        let s = vec![vec![1.0, 2.0]; 10];
        assert!(matches!(fit_pca(&s, 3), Err(PcaError::DimensionTooLarge { .. })));
        assert!(matches!(fit_pca(&s, 1), Err(PcaError::RankDeficient { achieved: 0, .. })));
    }

    #[test]
    fn bytes_round_trip() {
        let mut rng = per_ray_rng(5, 0);
        let samples: Vec<Vec<f64>> = (0..100).map(|_| (0..4).map(|_| gaussian(&mut rng)).collect()).collect();
        let m = fit_pca(&samples, 2).unwrap();
        assert_eq!(PcaModel::from_bytes(&m.to_bytes()).unwrap(), m);
        let mut bad = m.to_bytes();
        bad[0] ^= 0xff;
        assert!(PcaModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn residual_matches_dense_eigen_oracle() {
        let mut rng = per_ray_rng(6, 0);
        let scales: Vec<f64> = (0..64).map(|k| 1.0 / (1.0 + k as f64 * 0.2)).collect();
        let samples: Vec<Vec<f64>> = (0..400)
            .map(|_| scales.iter().map(|s| gaussian(&mut rng) * s).collect())
            .collect();
        let (_, cov) = covariance(&samples);
        let mut eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(64, 64, &cov)).eigenvalues.as_slice().to_vec();
        eig.sort_by(|a, b| b.total_cmp(a));
        for d in [8, 16, 32] {
            let m = fit_pca(&samples, d).unwrap();
            let oracle: f64 = eig[d..].iter().sum();
            assert_abs_diff_eq!(projection_residual(&m, &samples), oracle, epsilon = 1e-8);
        }
    }
}
