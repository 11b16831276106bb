use super::{FieldConfig, FieldError, FieldParams, GridSpec, HeadLayout};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Occupancy = 0,
    Feature = 1,
    Ego = 2,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Occupancy, Head::Feature, Head::Ego];

    pub fn name(self) -> &'static str {
        match self {
            Head::Occupancy => "occupancy",
            Head::Feature => "feature",
            Head::Ego => "ego",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub occ_logit: f64,
    pub feature: Vec<f64>,
    pub ego_logit: f64,
}

/// One grid corner of a bilinear lookup: cell index, weight and the weight's
/// derivative with respect to `x` and `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub cell: usize,
    pub weight: f64,
    pub d_dx: f64,
    pub d_dy: f64,
}

fn axis(v: f64, lo: f64, size: f64, n: usize) -> (usize, f64, f64) {
    let g = (v - lo) / size - 0.5;
    let (g, dg) = if g <= 0.0 {
        (0.0, 0.0)
    } else if g >= (n - 1) as f64 {
        ((n - 1) as f64, 0.0)
    } else {
        (g, 1.0 / size)
    };
    let i = (g.floor() as usize).min(n - 2);
    (i, g - i as f64, dg)
}

/// Bilinear weights over cell centers; constant within half a cell of the
/// region border.
pub fn interp_weights(grid: &GridSpec, x: f64, y: f64) -> Result<[Corner; 4], FieldError> {
    let inside = x >= grid.x_range.0 && x <= grid.x_range.1 && y >= grid.y_range.0 && y <= grid.y_range.1;
    if !inside {
        return Err(FieldError::OutOfRegion { x, y });
    }
    let (sx, sy) = grid.cell_size();
    let (ix, fx, dfx) = axis(x, grid.x_range.0, sx, grid.cells_x);
    let (iy, fy, dfy) = axis(y, grid.y_range.0, sy, grid.cells_y);
    let w = grid.cells_x;
    let corner = |cx: usize, cy: usize, wx: f64, wy: f64, dwx: f64, dwy: f64| Corner {
        cell: (iy + cy) * w + ix + cx,
        weight: wx * wy,
        d_dx: dwx * wy,
        d_dy: wx * dwy,
    };
    Ok([
        corner(0, 0, 1.0 - fx, 1.0 - fy, -dfx, -dfy),
        corner(1, 0, fx, 1.0 - fy, dfx, -dfy),
        corner(0, 1, 1.0 - fx, fy, -dfx, dfy),
        corner(1, 1, fx, fy, dfx, dfy),
    ])
}

fn normalized(cfg: &FieldConfig, z: f64, t: f64) -> [(f64, f64); 2] {
    let span = cfg.z_range.1 - cfg.z_range.0;
    [((z - cfg.z_range.0) / span, 1.0 / span), (t / cfg.t_max, 1.0 / cfg.t_max)]
}

/// `sin` and `cos` of `2^k * pi * s` for normalized height then time.
pub fn fourier_features(cfg: &FieldConfig, z: f64, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * cfg.fourier_freqs);
    for (s, _) in normalized(cfg, z, t) {
        for k in 0..cfg.fourier_freqs {
            let a = (1u64 << k) as f64 * PI * s;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Derivatives of the Fourier features with respect to `z` and `t`.
fn fourier_derivatives(cfg: &FieldConfig, z: f64, t: f64) -> (Vec<f64>, Vec<f64>) {
    let n = 4 * cfg.fourier_freqs;
    let (mut dz, mut dt) = (vec![0.0; n], vec![0.0; n]);
    for (j, (s, ds)) in normalized(cfg, z, t).into_iter().enumerate() {
        let target = if j == 0 { &mut dz } else { &mut dt };
        for k in 0..cfg.fourier_freqs {
            let f = (1u64 << k) as f64 * PI;
            let a = f * s;
            let i = j * 2 * cfg.fourier_freqs + 2 * k;
            target[i] = a.cos() * f * ds;
            target[i + 1] = -a.sin() * f * ds;
        }
    }
    (dz, dt)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(h: f64) -> f64 {
    h * sigmoid(h)
}

#[inline]
fn silu_grad(h: f64) -> f64 {
    let s = sigmoid(h);
    s * (1.0 + h * (1.0 - s))
}

#[derive(Debug, Clone, Default)]
pub(crate) struct HeadCache {
    pub input: Vec<f64>,
    pub h1: Vec<f64>,
    pub a1: Vec<f64>,
    pub h2: Vec<f64>,
    pub a2: Vec<f64>,
    pub out: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let n = x.len();
    out.extend(b.iter().enumerate().map(|(o, &bo)| bo + w[o * n..(o + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()));
}

pub(crate) fn head_forward(values: &[f64], l: &HeadLayout, input: Vec<f64>, cache: &mut HeadCache) {
    cache.input = input;
    affine(&values[l.w1.clone()], &values[l.b1.clone()], &cache.input, &mut cache.h1);
    cache.a1.clear();
    cache.a1.extend(cache.h1.iter().map(|&h| silu(h)));
    affine(&values[l.w2.clone()], &values[l.b2.clone()], &cache.a1, &mut cache.h2);
    cache.a2.clear();
    cache.a2.extend(cache.h2.iter().map(|&h| silu(h)));
    affine(&values[l.w3.clone()], &values[l.b3.clone()], &cache.a2, &mut cache.out);
}

/// Accumulates parameter gradients into `grad` (indexed like the full
/// parameter vector shifted by `offset`) and returns the input gradient.
pub(crate) fn head_backward(
    values: &[f64],
    l: &HeadLayout,
    cache: &HeadCache,
    dout: &[f64],
    grad: &mut [f64],
    offset: usize,
) -> Vec<f64> {
    let (i, n) = (l.input, l.hidden);
    let g = |r: &std::ops::Range<usize>| (r.start - offset)..(r.end - offset);
    let (w3g, b3g, w2g, b2g, w1g, b1g) = (g(&l.w3), g(&l.b3), g(&l.w2), g(&l.b2), g(&l.w1), g(&l.b1));
    let w3 = &values[l.w3.clone()];
    let mut da2 = vec![0.0; n];
    for (o, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        grad[b3g.start + o] += d;
        let row = &mut grad[w3g.start + o * n..w3g.start + (o + 1) * n];
        for (gw, &a) in row.iter_mut().zip(&cache.a2) {
            *gw += d * a;
        }
        for (da, &w) in da2.iter_mut().zip(&w3[o * n..(o + 1) * n]) {
            *da += d * w;
        }
    }
    let dh2: Vec<f64> = da2.iter().zip(&cache.h2).map(|(&d, &h)| d * silu_grad(h)).collect();
    let w2 = &values[l.w2.clone()];
    let mut da1 = vec![0.0; n];
    for (o, &d) in dh2.iter().enumerate() {
        grad[b2g.start + o] += d;
        let row = &mut grad[w2g.start + o * n..w2g.start + (o + 1) * n];
        for (gw, &a) in row.iter_mut().zip(&cache.a1) {
            *gw += d * a;
        }
        for (da, &w) in da1.iter_mut().zip(&w2[o * n..(o + 1) * n]) {
            *da += d * w;
        }
    }
    let dh1: Vec<f64> = da1.iter().zip(&cache.h1).map(|(&d, &h)| d * silu_grad(h)).collect();
    let w1 = &values[l.w1.clone()];
    let mut dx = vec![0.0; i];
    for (o, &d) in dh1.iter().enumerate() {
        grad[b1g.start + o] += d;
        let row = &mut grad[w1g.start + o * i..w1g.start + (o + 1) * i];
        for (gw, &x) in row.iter_mut().zip(&cache.input) {
            *gw += d * x;
        }
        for (dxi, &w) in dx.iter_mut().zip(&w1[o * i..(o + 1) * i]) {
            *dxi += d * w;
        }
    }
    dx
}

/// Interpolated grid feature followed by the Fourier encoding of `(z, t)`.
pub(crate) fn head_input(cfg: &FieldConfig, z: &[f64], corners: &[Corner; 4], zq: f64, tq: f64) -> Vec<f64> {
    let c = cfg.grid.channels;
    let mut x = vec![0.0; c];
    for k in corners {
        if k.weight == 0.0 {
            continue;
        }
        for (xi, &v) in x.iter_mut().zip(&z[k.cell * c..(k.cell + 1) * c]) {
            *xi += k.weight * v;
        }
    }
    x.extend(fourier_features(cfg, zq, tq));
    x
}

impl FieldParams {
    /// Raw output of one head at `q = (x, y, z, t)` given the grid `z`.
    pub fn query_head(&self, grid: &[f64], q: [f64; 4], head: Head) -> Result<Vec<f64>, FieldError> {
        let corners = interp_weights(&self.config.grid, q[0], q[1])?;
        let mut cache = HeadCache::default();
        let input = head_input(&self.config, grid, &corners, q[2], q[3]);
        head_forward(&self.values, &self.layout.heads[head as usize], input, &mut cache);
        Ok(cache.out)
    }

    pub fn query(&self, grid: &[f64], q: [f64; 4]) -> Result<HeadOutput, FieldError> {
        Ok(HeadOutput {
            occ_logit: self.query_head(grid, q, Head::Occupancy)?[0],
            feature: self.query_head(grid, q, Head::Feature)?,
            ego_logit: self.query_head(grid, q, Head::Ego)?[0],
        })
    }

    /// Occupancy probabilities at many points, in input order.
    pub fn occupancy_probabilities(&self, grid: &[f64], points: &[[f64; 4]]) -> Result<Vec<f64>, FieldError> {
        self.head_probabilities(grid, points, Head::Occupancy)
    }

    pub fn head_probabilities(&self, grid: &[f64], points: &[[f64; 4]], head: Head) -> Result<Vec<f64>, FieldError> {
        let out = crate::par::map_indexed(points.len(), |i| self.query_head(grid, points[i], head).map(|o| sigmoid(o[0])));
        out.into_iter().collect()
    }

    /// Gradient of output `k` of `head` with respect to `(x, y, z, t)`.
    pub fn input_gradient(&self, grid: &[f64], q: [f64; 4], head: Head, k: usize) -> Result<[f64; 4], FieldError> {
        let cfg = &self.config;
        let corners = interp_weights(&cfg.grid, q[0], q[1])?;
        let l = &self.layout.heads[head as usize];
        let mut cache = HeadCache::default();
        head_forward(&self.values, l, head_input(cfg, grid, &corners, q[2], q[3]), &mut cache);
        let mut dout = vec![0.0; l.output];
        dout[k] = 1.0;
        let mut scratch = vec![0.0; self.values.len()];
        let dx = head_backward(&self.values, l, &cache, &dout, &mut scratch, 0);
        let c = cfg.grid.channels;
        let (mut gx, mut gy) = (0.0, 0.0);
        for corner in &corners {
            let f = &grid[corner.cell * c..(corner.cell + 1) * c];
            let dot: f64 = f.iter().zip(&dx[..c]).map(|(a, b)| a * b).sum();
            gx += corner.d_dx * dot;
            gy += corner.d_dy * dot;
        }
        let (dz, dt) = fourier_derivatives(cfg, q[2], q[3]);
        let gz = dz.iter().zip(&dx[c..]).map(|(a, b)| a * b).sum();
        let gt = dt.iter().zip(&dx[c..]).map(|(a, b)| a * b).sum();
        Ok([gx, gy, gz, gt])
    }
}

pub(crate) fn sigmoid_pub(x: f64) -> f64 {
    sigmoid(x)
}
