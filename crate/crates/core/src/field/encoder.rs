use super::{FieldConfig, FieldError, FieldParams, Mode};
use crate::par;
use crate::query::EncoderInput;
use std::ops::Range;

const LEAK: f64 = 0.01;

/// Per-cell `ln(1 + count)` and mean height of every past scan, layout
/// `[row][col][2 * scan + {0, 1}]`. Points outside the grid are ignored.
pub fn pillar_histogram(cfg: &FieldConfig, input: &EncoderInput) -> Result<Vec<f64>, FieldError> {
    if input.scans.len() > cfg.past_scans {
        return Err(FieldError::TooManyScans {
            got: input.scans.len(),
            max: cfg.past_scans,
        });
    }
    let g = &cfg.grid;
    let cin = cfg.input_channels();
    let (sx, sy) = g.cell_size();
    let mut count = vec![0usize; g.cells() * cfg.past_scans];
    let mut zsum = vec![0.0; g.cells() * cfg.past_scans];
    for (k, pts) in input.scans.iter().enumerate() {
        for p in pts {
            let fx = ((p.x - g.x_range.0) / sx).floor();
            let fy = ((p.y - g.y_range.0) / sy).floor();
            if !(fx >= 0.0 && fy >= 0.0 && fx < g.cells_x as f64 && fy < g.cells_y as f64) {
                continue;
            }
            let cell = fy as usize * g.cells_x + fx as usize;
            count[cell * cfg.past_scans + k] += 1;
            zsum[cell * cfg.past_scans + k] += p.z;
        }
    }
    let mut out = vec![0.0; g.cells() * cin];
    for cell in 0..g.cells() {
        for k in 0..cfg.past_scans {
            let n = count[cell * cfg.past_scans + k];
            if n > 0 {
                out[cell * cin + 2 * k] = (1.0 + n as f64).ln();
                out[cell * cin + 2 * k + 1] = zsum[cell * cfg.past_scans + k] / n as f64;
            }
        }
    }
    Ok(out)
}

pub(crate) struct EncoderCache {
    pub hist: Vec<f64>,
    pub embed: Vec<f64>,
    pub pre1: Vec<f64>,
    pub act1: Vec<f64>,
    pub z: Vec<f64>,
}

fn conv3x3(cfg: &FieldConfig, w: &[f64], b: &[f64], input: &[f64]) -> Vec<f64> {
    let (h, wd, c) = (cfg.grid.cells_y, cfg.grid.cells_x, cfg.grid.channels);
    let rows = par::map_indexed(h, |y| {
        let mut row = vec![0.0; wd * c];
        for x in 0..wd {
            let out = &mut row[x * c..(x + 1) * c];
            out.copy_from_slice(b);
            for ky in 0..3 {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= wd as isize {
                        continue;
                    }
                    let src = &input[(yy as usize * wd + xx as usize) * c..][..c];
                    for (o, acc) in out.iter_mut().enumerate() {
                        let wk = &w[((o * 3 + ky) * 3 + kx) * c..][..c];
                        *acc += wk.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        row
    });
    rows.concat()
}

/// Accumulates weight, bias and input gradients of a 3x3 convolution.
fn conv3x3_backward(
    cfg: &FieldConfig,
    w: &[f64],
    input: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    din: Option<&mut [f64]>,
) {
    let (h, wd, c) = (cfg.grid.cells_y, cfg.grid.cells_x, cfg.grid.channels);
    let mut din = din;
    for y in 0..h {
        for x in 0..wd {
            let g = &dout[(y * wd + x) * c..][..c];
            for (o, &go) in g.iter().enumerate() {
                db[o] += go;
            }
            for ky in 0..3 {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= wd as isize {
                        continue;
                    }
                    let base = (yy as usize * wd + xx as usize) * c;
                    let src = &input[base..base + c];
                    for (o, &go) in g.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        let off = ((o * 3 + ky) * 3 + kx) * c;
                        for (dwi, &s) in dw[off..off + c].iter_mut().zip(src) {
                            *dwi += go * s;
                        }
                        if let Some(d) = din.as_deref_mut() {
                            for (di, &wi) in d[base..base + c].iter_mut().zip(&w[off..off + c]) {
                                *di += go * wi;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slice<'a>(v: &'a [f64], r: &Range<usize>) -> &'a [f64] {
    &v[r.clone()]
}

pub(crate) fn encode_forward(p: &FieldParams, hist: Vec<f64>) -> EncoderCache {
    let cfg = &p.config;
    let l = &p.layout;
    let (c, cin) = (cfg.grid.channels, cfg.input_channels());
    let ew = slice(&p.values, &l.embed_w);
    let eb = slice(&p.values, &l.embed_b);
    let mut embed = vec![0.0; cfg.grid.cells() * c];
    for cell in 0..cfg.grid.cells() {
        let h = &hist[cell * cin..(cell + 1) * cin];
        for o in 0..c {
            embed[cell * c + o] = eb[o] + ew[o * cin..(o + 1) * cin].iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let pre1 = conv3x3(cfg, slice(&p.values, &l.conv1_w), slice(&p.values, &l.conv1_b), &embed);
    let act1: Vec<f64> = pre1.iter().map(|&v| if v > 0.0 { v } else { LEAK * v }).collect();
    let z = conv3x3(cfg, slice(&p.values, &l.conv2_w), slice(&p.values, &l.conv2_b), &act1);
    EncoderCache {
        hist,
        embed,
        pre1,
        act1,
        z,
    }
}

pub(crate) fn encode_backward(p: &FieldParams, cache: &EncoderCache, dz: &[f64], grad: &mut [f64]) {
    let cfg = &p.config;
    let l = &p.layout;
    let (c, cin) = (cfg.grid.channels, cfg.input_channels());
    let mut dact1 = vec![0.0; dz.len()];
    {
        let (dw, rest) = grad[l.conv2_w.start..l.conv2_b.end].split_at_mut(l.conv2_w.len());
        conv3x3_backward(cfg, slice(&p.values, &l.conv2_w), &cache.act1, dz, dw, rest, Some(&mut dact1));
    }
    let dpre1: Vec<f64> = dact1
        .iter()
        .zip(&cache.pre1)
        .map(|(&g, &v)| if v > 0.0 { g } else { LEAK * g })
        .collect();
    let mut dembed = vec![0.0; dz.len()];
    {
        let (dw, rest) = grad[l.conv1_w.start..l.conv1_b.end].split_at_mut(l.conv1_w.len());
        conv3x3_backward(cfg, slice(&p.values, &l.conv1_w), &cache.embed, &dpre1, dw, rest, Some(&mut dembed));
    }
    let (dw, db) = grad[l.embed_w.start..l.embed_b.end].split_at_mut(l.embed_w.len());
    for cell in 0..cfg.grid.cells() {
        let h = &cache.hist[cell * cin..(cell + 1) * cin];
        for o in 0..c {
            let g = dembed[cell * c + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            for (d, &x) in dw[o * cin..(o + 1) * cin].iter_mut().zip(h) {
                *d += g * x;
            }
        }
    }
}

/// BEV grid `Z` with layout `[row][col][channel]`. In per-scene mode the
/// grid is the stored parameter and `input` is ignored.
pub fn encode(p: &FieldParams, input: &EncoderInput) -> Result<Vec<f64>, FieldError> {
    match p.mode {
        Mode::FitPerScene => Ok(p.values[p.layout.grid.clone()].to_vec()),
        Mode::Amortized => Ok(encode_forward(p, pillar_histogram(&p.config, input)?).z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::tests::tiny_config;
    use crate::field::{GridSpec, Mode};
    use crate::geom::Vec3;

    #[test]
    fn histogram_counts_and_heights() {
        let cfg = tiny_config();
        let input = EncoderInput {
            scans: vec![
                vec![Vec3::new(-3.5, -2.5, 1.0), Vec3::new(-3.2, -2.1, 2.0), Vec3::new(40.0, 0.0, 0.0)],
                vec![Vec3::new(3.9, 2.9, -0.5)],
            ],
        };
        let h = pillar_histogram(&cfg, &input).unwrap();
        assert_eq!(h.len(), 12 * 4);
        assert!((h[0] - 3f64.ln()).abs() < 1e-15);
        assert_eq!(h[1], 1.5);
        let last = 11 * 4;
        assert_eq!(&h[last..last + 4], &[0.0, 0.0, 2f64.ln(), -0.5]);
        assert_eq!(h.iter().filter(|&&v| v != 0.0).count(), 4);
        let too_many = EncoderInput {
            scans: vec![vec![]; 3],
        };
        assert!(matches!(pillar_histogram(&cfg, &too_many), Err(FieldError::TooManyScans { .. })));
    }

    #[test]
    fn empty_input_gives_zero_grid() {
        let p = FieldParams::init(tiny_config(), Mode::Amortized, 2).unwrap();
        let z = encode(&p, &EncoderInput::default()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pillar_support_is_five_by_five() {
        let mut cfg = tiny_config();
        cfg.grid = GridSpec {
            x_range: (0.0, 9.0),
            y_range: (0.0, 9.0),
            cells_x: 9,
            cells_y: 9,
            channels: 3,
        };
        let p = FieldParams::init(cfg, Mode::Amortized, 5).unwrap();
        let input = EncoderInput {
            scans: vec![vec![Vec3::new(4.5, 4.5, 1.0)]],
        };
        let z = encode(&p, &input).unwrap();
        for y in 0..9usize {
            for x in 0..9usize {
                let nz = z[(y * 9 + x) * 3..][..3].iter().any(|&v| v != 0.0);
                let near = y.abs_diff(4) <= 2 && x.abs_diff(4) <= 2;
                if !near {
                    assert!(!nz, "support leaked to ({x}, {y})");
                }
            }
        }
        assert!(z[(4 * 9 + 4) * 3..][..3].iter().any(|&v| v != 0.0));
    }
}
