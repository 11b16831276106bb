//! Voxel labels from lidar evidence: traversed voxels are free, voxels
//! holding a return (or lying inside a known box) are occupied.

use super::{EvalError, EvalGrid};
use crate::geom::{Ray, Vec3};
use crate::par;
use crate::scene::LidarScan;

/// Nearest scans further than this from a probe time leave it unknown.
pub const MATCH_WINDOW: f64 = 0.3;
/// Returns are assigned to the voxel just past the surface.
const HIT_NUDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Unknown = 0,
    Free = 1,
    Occupied = 2,
}

/// Voxel faces along one axis: `lo + j * step`, `j = 0..=n`.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    step: f64,
    n: usize,
}

impl Axis {
    fn face(&self, j: usize) -> f64 {
        self.lo + j as f64 * self.step
    }

    /// Index whose half-open span `[face(j), face(j + 1))` holds `v`.
    fn index_of(&self, v: f64) -> Option<usize> {
        if !(v >= self.face(0) && v < self.face(self.n)) {
            return None;
        }
        let mut j = (((v - self.lo) / self.step).floor().max(0.0) as usize).min(self.n - 1);
        while j > 0 && v < self.face(j) {
            j -= 1;
        }
        while j + 1 < self.n && v >= self.face(j + 1) {
            j += 1;
        }
        Some(j)
    }
}

fn axes(grid: &EvalGrid) -> [Axis; 3] {
    let (nx, ny, nz) = grid.dims();
    [
        Axis {
            lo: grid.x_range.0,
            step: grid.step,
            n: nx,
        },
        Axis {
            lo: grid.y_range.0,
            step: grid.step,
            n: ny,
        },
        Axis {
            lo: grid.z_range.0,
            step: grid.step,
            n: nz,
        },
    ]
}

fn cross(face: f64, o: f64, d: f64) -> f64 {
    (face - o) / d
}

fn hit_point(r: &Ray) -> Vec3 {
    r.origin + r.direction * (r.length() + HIT_NUDGE)
}

fn hit_voxel(ax: &[Axis; 3], grid: &EvalGrid, r: &Ray) -> Option<usize> {
    let p = hit_point(r);
    Some(grid.index(ax[0].index_of(p.x)?, ax[1].index_of(p.y)?, ax[2].index_of(p.z)?))
}

/// Calls `visit` for every voxel the segment `o + s d`, `s in [0, len]`,
/// passes through over a positive length. Incremental grid stepping; every
/// crossing time is recomputed from the face position so it agrees exactly
/// with a per-voxel slab test.
fn traverse(ax: &[Axis; 3], grid: &EvalGrid, o: &Vec3, d: &Vec3, len: f64, mut visit: impl FnMut(usize)) {
    let (mut s_in, mut s_out) = (0.0f64, len);
    for k in 0..3 {
        let a = &ax[k];
        if d[k] == 0.0 {
            if a.index_of(o[k]).is_none() {
                return;
            }
            continue;
        }
        let (t0, t1) = (cross(a.face(0), o[k], d[k]), cross(a.face(a.n), o[k], d[k]));
        s_in = s_in.max(t0.min(t1));
        s_out = s_out.min(t0.max(t1));
    }
    if !(s_in < s_out) {
        return;
    }
    let mut idx = [0usize; 3];
    for k in 0..3 {
        let a = &ax[k];
        if d[k] == 0.0 {
            idx[k] = a.index_of(o[k]).expect("checked above");
            continue;
        }
        let guess = o[k] + d[k] * s_in;
        let mut j = (((guess - a.lo) / a.step).floor().max(0.0) as usize).min(a.n - 1);
        // Settle on the voxel occupied just after `s_in`.
        if d[k] > 0.0 {
            while j > 0 && cross(a.face(j), o[k], d[k]) > s_in {
                j -= 1;
            }
            while j + 1 < a.n && cross(a.face(j + 1), o[k], d[k]) <= s_in {
                j += 1;
            }
        } else {
            while j + 1 < a.n && cross(a.face(j + 1), o[k], d[k]) > s_in {
                j += 1;
            }
            while j > 0 && cross(a.face(j), o[k], d[k]) <= s_in {
                j -= 1;
            }
        }
        idx[k] = j;
    }
    let mut s = s_in;
    loop {
        let mut exit = [f64::INFINITY; 3];
        for k in 0..3 {
            if d[k] > 0.0 {
                exit[k] = cross(ax[k].face(idx[k] + 1), o[k], d[k]);
            } else if d[k] < 0.0 {
                exit[k] = cross(ax[k].face(idx[k]), o[k], d[k]);
            }
        }
        let leave = exit[0].min(exit[1]).min(exit[2]);
        if leave.min(s_out) > s {
            visit(grid.index(idx[0], idx[1], idx[2]));
        }
        if leave >= s_out {
            return;
        }
        for k in 0..3 {
            if exit[k] == leave {
                if d[k] > 0.0 {
                    idx[k] += 1;
                    if idx[k] == ax[k].n {
                        return;
                    }
                } else {
                    if idx[k] == 0 {
                        return;
                    }
                    idx[k] -= 1;
                }
            }
        }
        s = s.max(leave);
    }
}

/// Index of the scan nearest in time to `t` within the matching window.
pub fn match_scan(scans: &[LidarScan], t: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scans.iter().enumerate() {
        let Some(r) = s.rays.first() else { continue };
        let dt = (r.time - t).abs();
        if dt <= MATCH_WINDOW && best.is_none_or(|(_, b)| dt < b) {
            best = Some((i, dt));
        }
    }
    best.map(|(i, _)| i)
}

fn finish(grid: &EvalGrid, t: f64, free: Vec<bool>, occ: Vec<bool>, in_box: &(dyn Fn(&Vec3, f64) -> bool + Sync)) -> Vec<Label> {
    (0..grid.len())
        .map(|i| {
            if occ[i] || in_box(&grid.center(i), t) {
                Label::Occupied
            } else if free[i] {
                Label::Free
            } else {
                Label::Unknown
            }
        })
        .collect()
}

/// Labels of every voxel at every probe time, outer index over
/// `grid.times`. Scans and `in_box` are in the evaluation frame. Occupied
/// wins over free; times without a matching scan stay unknown.
pub fn label_by_raytrace(
    scans: &[LidarScan],
    grid: &EvalGrid,
    in_box: &(dyn Fn(&Vec3, f64) -> bool + Sync),
) -> Result<Vec<Vec<Label>>, EvalError> {
    grid.validate()?;
    let ax = axes(grid);
    Ok(par::map_indexed(grid.times.len(), |ti| {
        let t = grid.times[ti];
        let Some(si) = match_scan(scans, t) else {
            return vec![Label::Unknown; grid.len()];
        };
        let mut free = vec![false; grid.len()];
        let mut occ = vec![false; grid.len()];
        for r in &scans[si].rays {
            traverse(&ax, grid, &r.origin, &r.direction, r.length(), |i| free[i] = true);
            if !r.miss {
                if let Some(i) = hit_voxel(&ax, grid, r) {
                    occ[i] = true;
                }
            }
        }
        finish(grid, t, free, occ, in_box)
    }))
}

/// Reference labeling: every ray is slab-tested against every voxel.
pub fn label_by_slab_oracle(
    scans: &[LidarScan],
    grid: &EvalGrid,
    in_box: &(dyn Fn(&Vec3, f64) -> bool + Sync),
) -> Result<Vec<Vec<Label>>, EvalError> {
    grid.validate()?;
    let ax = axes(grid);
    let (nx, ny, nz) = grid.dims();
    let mut out = Vec::new();
    for &t in &grid.times {
        let Some(si) = match_scan(scans, t) else {
            out.push(vec![Label::Unknown; grid.len()]);
            continue;
        };
        let rays = &scans[si].rays;
        let mut free = vec![false; grid.len()];
        let mut occ = vec![false; grid.len()];
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let i = grid.index(ix, iy, iz);
                    let j = [ix, iy, iz];
                    for r in rays {
                        let p = hit_point(r);
                        if !r.miss && (0..3).all(|k| p[k] >= ax[k].face(j[k]) && p[k] < ax[k].face(j[k] + 1)) {
                            occ[i] = true;
                        }
                        let (mut enter, mut exit) = (0.0f64, r.length());
                        for k in 0..3 {
                            let (lo, hi) = (ax[k].face(j[k]), ax[k].face(j[k] + 1));
                            let (o, d) = (r.origin[k], r.direction[k]);
                            if d == 0.0 {
                                if !(o >= lo && o < hi) {
                                    exit = f64::NEG_INFINITY;
                                }
                                continue;
                            }
                            let (a, b) = (cross(lo, o, d), cross(hi, o, d));
                            enter = enter.max(a.min(b));
                            exit = exit.min(a.max(b));
                        }
                        if exit > enter {
                            free[i] = true;
                        }
                    }
                }
            }
        }
        out.push(finish(grid, t, free, occ, in_box));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, RayRng};

    fn small_grid() -> EvalGrid {
        EvalGrid {
            x_range: (-2.0, 2.0),
            y_range: (-1.6, 1.6),
            z_range: (-0.4, 1.2),
            step: 0.4,
            times: vec![0.5],
            t_max: 3.0,
        }
    }

    fn scan(rays: Vec<Ray>) -> LidarScan {
        LidarScan {
            rows: 1,
            cols: rays.len(),
            max_range: 10.0,
            rays,
        }
    }

    fn no_box(_: &Vec3, _: f64) -> bool {
        false
    }

    #[test]
    fn hit_voxel_is_occupied_and_path_is_free() {
        let g = small_grid();
        let r = Ray::hit(Vec3::new(-1.9, 0.1, 0.3), Vec3::new(1.3, 0.1, 0.3), 0.5);
        let labels = &label_by_raytrace(&[scan(vec![r])], &g, &no_box).unwrap()[0];
        let ax = axes(&g);
        let at = |x: f64| g.index(ax[0].index_of(x).unwrap(), ax[1].index_of(0.1).unwrap(), ax[2].index_of(0.3).unwrap());
        assert_eq!(labels[at(1.3)], Label::Occupied);
        for x in [-1.9, -1.0, 0.0, 1.0] {
            assert_eq!(labels[at(x)], Label::Free, "x = {x}");
        }
        assert_eq!(labels[at(1.9)], Label::Unknown);
        assert_eq!(labels.iter().filter(|&&l| l != Label::Unknown).count(), 9);
    }

    #[test]
    fn no_matching_scan_leaves_unknown() {
        let mut g = small_grid();
        g.times = vec![2.0];
        let r = Ray::hit(Vec3::new(0.0, 0.0, 0.3), Vec3::new(1.0, 0.0, 0.3), 0.5);
        let labels = label_by_raytrace(&[scan(vec![r])], &g, &no_box).unwrap();
        assert!(labels[0].iter().all(|&l| l == Label::Unknown));
    }

    #[test]
    fn box_membership_marks_occupied() {
        let g = small_grid();
        let inside = |p: &Vec3, _: f64| p.x > 1.0;
        let labels = label_by_raytrace(&[], &g, &inside).unwrap();
        assert_eq!(labels[0].iter().all(|&l| l == Label::Unknown), true);
        let r = Ray::missed(Vec3::new(0.0, 0.0, 0.3), Vec3::y(), 1.0, 0.5);
        let labels = label_by_raytrace(&[scan(vec![r])], &g, &inside).unwrap();
        let occupied = labels[0].iter().filter(|&&l| l == Label::Occupied).count();
        let (_, ny, nz) = g.dims();
        assert_eq!(occupied, 2 * ny * nz);
    }

    fn random_rays(seed: u64, n: usize, origin: Vec3) -> Vec<Ray> {
        let mut rng = RayRng::new(seed, Domain::Generic, 0);
        (0..n)
            .map(|i| {
                let dir = Vec3::new(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-0.6, 0.3)).normalize();
                let len = rng.range(0.2, 6.0);
                if i % 5 == 0 {
                    Ray::missed(origin, dir, len, 0.5)
                } else {
                    Ray {
                        origin,
                        endpoint: origin + dir * len,
                        direction: dir,
                        miss: false,
                        time: 0.5,
                    }
                }
            })
            .collect()
    }

    #[test]
    fn traversal_matches_slab_oracle() {
        let g = small_grid();
        let in_box = |p: &Vec3, _: f64| p.x > 1.5 && p.z < 0.0;
        // Origins on voxel faces and corners as well as generic positions.
        let origins = [
            Vec3::new(0.0, 0.0, 0.4),
            Vec3::new(0.4, -0.4, 0.0),
            Vec3::new(0.13, 0.71, 0.55),
            Vec3::new(-3.0, 0.2, 0.5),
        ];
        for (k, o) in origins.iter().enumerate() {
            let s = scan(random_rays(k as u64, 300, *o));
            let a = label_by_raytrace(std::slice::from_ref(&s), &g, &in_box).unwrap();
            let b = label_by_slab_oracle(&[s], &g, &in_box).unwrap();
            assert_eq!(a, b, "origin {k}");
        }
    }

    #[test]
    fn axis_aligned_and_diagonal_rays_match_oracle() {
        let g = small_grid();
        let o = Vec3::new(0.0, 0.0, 0.4);
        let mut rays = Vec::new();
        for d in [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::z(), Vec3::new(1.0, 1.0, 0.0).normalize(), Vec3::new(-1.0, 1.0, -1.0).normalize()] {
            rays.push(Ray::missed(o, d, 3.0, 0.5));
            rays.push(Ray {
                origin: o,
                endpoint: o + d * 1.2,
                direction: d,
                miss: false,
                time: 0.5,
            });
        }
        let s = scan(rays);
        assert_eq!(
            label_by_raytrace(std::slice::from_ref(&s), &g, &no_box).unwrap(),
            label_by_slab_oracle(&[s], &g, &no_box).unwrap()
        );
    }
}
