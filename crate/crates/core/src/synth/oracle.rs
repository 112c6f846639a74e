//! Slow, direct-from-definition reference implementations.
//!
//! Nothing here calls the production routine it is meant to check; each
//! function works from raw rasters and plain arithmetic.

use std::collections::{BTreeMap, BTreeSet};

use crate::camera::{CameraExtrinsics, CameraIntrinsics};
use crate::grid::BevGridSpec;
use crate::labels::HeightMap;
use crate::panoptic::{ClassGroup, PanopticBevMap, VOID};
use crate::raster::Raster;

/// Interval of `t` in `[0, 1]` for which `a + t (b - a)` lies in the closed
/// square `[c, c+1] x [r, r+1]` (edge coordinates).
fn clip_segment(a: (f64, f64), b: (f64, f64), col: i64, row: i64) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, d, lo, hi) in [
        (a.0, b.0 - a.0, col as f64, col as f64 + 1.0),
        (a.1, b.1 - a.1, row as f64, row as f64 + 1.0),
    ] {
        if d == 0.0 {
            if p < lo || p > hi {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - p) / d, (hi - p) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOcclusion {
    pub occluded: Raster<bool>,
    /// Cells whose verdict flips depending on whether cells the ray only
    /// grazes (zero-length contact) are counted.
    pub tie: Raster<bool>,
}

/// Exact segment-versus-cell test for every cell inside the bounding box of
/// the ray from the camera to each target center.
pub fn oracle_occlusion(h: &HeightMap, grid: &BevGridSpec, margin: f64) -> OracleOcclusion {
    let (w, ht) = (grid.cells_x, grid.cells_z);
    let cam = ((0.0 - grid.x_min) / grid.resolution, (grid.z_max - 0.0) / grid.resolution);
    let height = |r: i64, c: i64| -> f64 {
        if r >= 0 && c >= 0 && (r as usize) < ht && (c as usize) < w {
            h.heights.get(r as usize, c as usize).unwrap_or(0.0)
        } else {
            0.0
        }
    };
    let mut occluded = Raster::filled(w, ht, false);
    let mut tie = Raster::filled(w, ht, false);
    for row in 0..ht {
        for col in 0..w {
            let target = (col as f64 + 0.5, row as f64 + 0.5);
            let len = ((target.0 - cam.0).powi(2) + (target.1 - cam.1).powi(2)).sqrt();
            let c_lo = cam.0.min(target.0).floor() as i64 - 1;
            let c_hi = cam.0.max(target.0).ceil() as i64 + 1;
            let r_lo = cam.1.min(target.1).floor() as i64 - 1;
            let r_hi = cam.1.max(target.1).ceil() as i64 + 1;
            let mut run = f64::NEG_INFINITY;
            let mut graze = f64::NEG_INFINITY;
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    if r == row as i64 && c == col as i64 {
                        continue;
                    }
                    let Some((t0, t1)) = clip_segment(cam, target, c, r) else { continue };
                    if (t1 - t0) * len > 1e-9 {
                        run = run.max(height(r, c));
                    } else {
                        graze = graze.max(height(r, c));
                    }
                }
            }
            let own = height(row as i64, col as i64);
            let strict = own < run - margin;
            let loose = own < run.max(graze) - margin;
            occluded.set(row, col, strict);
            tie.set(row, col, strict != loose);
        }
    }
    OracleOcclusion { occluded, tie }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OracleTriple {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OraclePq {
    pub per_class: BTreeMap<u16, OracleTriple>,
    pub all: OracleTriple,
    pub things: OracleTriple,
    pub stuff: OracleTriple,
}

/// Panoptic quality with exhaustive pairwise IoU by full pixel scans.
pub fn oracle_pq(pred: &PanopticBevMap, gt: &PanopticBevMap) -> OraclePq {
    let n = gt.class.len();
    let seg = |m: &PanopticBevMap, i: usize| (m.class.as_slice()[i], m.instance.as_slice()[i]);
    let valid = |i: usize| gt.class.as_slice()[i] != VOID;
    let mut gt_segs = BTreeSet::new();
    let mut pred_segs = BTreeSet::new();
    for i in (0..n).filter(|&i| valid(i)) {
        gt_segs.insert(seg(gt, i));
        if pred.class.as_slice()[i] != VOID {
            pred_segs.insert(seg(pred, i));
        }
    }
    let mut classes: BTreeSet<u16> = gt_segs.iter().map(|s| s.0).collect();
    classes.extend(pred_segs.iter().map(|s| s.0));

    let mut per_class = BTreeMap::new();
    for &class in &classes {
        let ps: Vec<_> = pred_segs.iter().filter(|s| s.0 == class).copied().collect();
        let gs: Vec<_> = gt_segs.iter().filter(|s| s.0 == class).copied().collect();
        let mut tp = Vec::new();
        for &p in &ps {
            for &g in &gs {
                let mut inter = 0usize;
                let mut union = 0usize;
                for i in (0..n).filter(|&i| valid(i)) {
                    let a = pred.class.as_slice()[i] != VOID && seg(pred, i) == p;
                    let b = seg(gt, i) == g;
                    inter += usize::from(a && b);
                    union += usize::from(a || b);
                }
                let iou = inter as f64 / union as f64;
                if iou > 0.5 {
                    tp.push((p, g, iou));
                }
            }
        }
        let n_tp = tp.len() as f64;
        let n_fp = (ps.len() - tp.len()) as f64;
        let n_fn = (gs.len() - tp.len()) as f64;
        let sum: f64 = tp.iter().map(|t| t.2).sum();
        let denom = n_tp + 0.5 * n_fp + 0.5 * n_fn;
        per_class.insert(
            class,
            OracleTriple {
                pq: if denom > 0.0 { sum / denom } else { 0.0 },
                sq: if n_tp > 0.0 { sum / n_tp } else { 0.0 },
                rq: if denom > 0.0 { n_tp / denom } else { 0.0 },
            },
        );
    }
    let avg = |keep: &dyn Fn(u16) -> bool| {
        let v: Vec<&OracleTriple> = per_class.iter().filter(|(c, _)| keep(**c)).map(|(_, t)| t).collect();
        if v.is_empty() {
            return OracleTriple::default();
        }
        let k = v.len() as f64;
        OracleTriple {
            pq: v.iter().map(|t| t.pq).sum::<f64>() / k,
            sq: v.iter().map(|t| t.sq).sum::<f64>() / k,
            rq: v.iter().map(|t| t.rq).sum::<f64>() / k,
        }
    };
    let cats = gt.categories.clone();
    OraclePq {
        all: avg(&|_| true),
        things: avg(&|c| cats.is_thing(c)),
        stuff: avg(&|c| !cats.is_thing(c)),
        per_class,
    }
}

/// Per-class IoU from a per-pixel tally, and the mean over classes present
/// in the ground truth.
pub fn oracle_miou(pred: &Raster<u16>, gt: &Raster<u16>) -> (BTreeMap<u16, f64>, f64) {
    let mut tp: BTreeMap<u16, usize> = BTreeMap::new();
    let mut fp: BTreeMap<u16, usize> = BTreeMap::new();
    let mut fn_: BTreeMap<u16, usize> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g == VOID {
            continue;
        }
        if p == g {
            *tp.entry(g).or_default() += 1;
        } else {
            *fn_.entry(g).or_default() += 1;
            if p != VOID {
                *fp.entry(p).or_default() += 1;
            }
        }
    }
    let gt_classes: BTreeSet<u16> = gt.iter().copied().filter(|&g| g != VOID).collect();
    let mut out = BTreeMap::new();
    for c in gt_classes {
        let t = *tp.get(&c).unwrap_or(&0) as f64;
        let d = t + *fp.get(&c).unwrap_or(&0) as f64 + *fn_.get(&c).unwrap_or(&0) as f64;
        out.insert(c, t / d);
    }
    let mean = if out.is_empty() {
        0.0
    } else {
        out.values().sum::<f64>() / out.len() as f64
    };
    (out, mean)
}

/// Central differences of `f` at `x`.
pub fn oracle_finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Square-window dilation (`all = false`) or erosion (`all = true`) by
/// scanning every window; out-of-raster pixels are skipped.
pub fn oracle_window(mask: &Raster<bool>, size: usize, all: bool) -> Raster<bool> {
    let r = (size / 2) as i64;
    Raster::from_fn(mask.width(), mask.height(), |row, col| {
        let mut any = false;
        let mut every = true;
        for dr in -r..=r {
            for dc in -r..=r {
                let (y, x) = (row as i64 + dr, col as i64 + dc);
                if y < 0 || x < 0 || y >= mask.height() as i64 || x >= mask.width() as i64 {
                    continue;
                }
                let v = *mask.get(y as usize, x as usize);
                any |= v;
                every &= v;
            }
        }
        if all {
            every
        } else {
            any
        }
    })
}

pub fn oracle_close(mask: &Raster<bool>, dilation: usize, erosion: usize) -> Raster<bool> {
    oracle_window(&oracle_window(mask, dilation, false), erosion, true)
}

/// Densification by window-scan closing: classes are closed and written
/// into void pixels in the order tall stuff, short stuff, things,
/// vegetation.
pub fn oracle_densify(sparse: &PanopticBevMap, sizes: &BTreeMap<ClassGroup, (usize, usize)>) -> PanopticBevMap {
    let cats = sparse.categories.clone();
    let mut out = sparse.clone();
    let present: BTreeSet<u16> = sparse.class.iter().copied().filter(|&c| c != VOID).collect();
    for stage in [
        vec![ClassGroup::TallStuff],
        vec![ClassGroup::ShortStuff],
        vec![ClassGroup::Vehicle, ClassGroup::Person],
        vec![ClassGroup::Vegetation],
    ] {
        for &class in &present {
            let g = cats.group(class).expect("known class");
            if !stage.contains(&g) {
                continue;
            }
            let (d, e) = sizes[&g];
            let closed = oracle_close(&sparse.class.map(|&c| c == class), d, e);
            for i in 0..closed.len() {
                if closed.as_slice()[i] && out.class.as_slice()[i] == VOID {
                    out.class.as_mut_slice()[i] = class;
                }
            }
        }
    }
    out
}

/// Point-in-rotated-rectangle by the four edge half-planes of the corner
/// polygon `(x, z)` given in order (boundary inclusive, 1e-12 slack).
pub fn oracle_point_in_rect(corners: &[(f64, f64); 4], p: (f64, f64)) -> bool {
    let mut sign = 0.0f64;
    for k in 0..4 {
        let a = corners[k];
        let b = corners[(k + 1) % 4];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let scale = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let s = cross / scale;
        if s.abs() <= 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = s.signum();
        } else if s.signum() != sign {
            return false;
        }
    }
    true
}

/// Corners of a yawed rectangle, from first principles.
pub fn oracle_rect_corners(center: (f64, f64), length: f64, width: f64, yaw: f64) -> [(f64, f64); 4] {
    // Length direction at yaw 0 is +z; yaw turns it toward +x.
    let along = (libm::sin(yaw), libm::cos(yaw));
    let across = (along.1, -along.0);
    let pt = |a: f64, b: f64| {
        (
            center.0 + a * along.0 + b * across.0,
            center.1 + a * along.1 + b * across.1,
        )
    };
    let (l, w) = (length / 2.0, width / 2.0);
    [pt(l, w), pt(l, -w), pt(-l, -w), pt(-l, w)]
}

/// Greedy NMS with pixel-counted IoU over half-open boxes
/// `(row0, col0, row1, col1)`. Returns kept indices in selection order.
pub fn oracle_nms(boxes: &[(usize, usize, usize, usize)], conf: &[f64], score_thr: f64, nms_thr: f64) -> Vec<usize> {
    let cells = |b: &(usize, usize, usize, usize)| -> BTreeSet<(usize, usize)> {
        (b.0..b.2).flat_map(|r| (b.1..b.3).map(move |c| (r, c))).collect()
    };
    let iou = |a: usize, b: usize| {
        let (sa, sb) = (cells(&boxes[a]), cells(&boxes[b]));
        let inter = sa.intersection(&sb).count();
        let union = sa.union(&sb).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    };
    let mut alive: Vec<usize> = (0..boxes.len()).filter(|&i| conf[i] >= score_thr).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        // Highest confidence, earliest index on ties.
        let mut best = alive[0];
        for &i in &alive {
            if conf[i] > conf[best] || (conf[i] == conf[best] && i < best) {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| i != best && iou(i, best) <= nms_thr);
    }
    kept
}

/// Pixel displacement per meter of ground displacement, from the two
/// partial derivatives of the projection written out separately.
pub fn oracle_sensitivity(fx: f64, fy: f64, x: f64, y: f64, z: f64) -> f64 {
    let du_dx = fx / z;
    let du_dz = -fx * x / (z * z);
    let dv_dz = -fy * y / (z * z);
    // The x-derivative of u and the summed z-derivatives of u and v, taken
    // as one displacement vector.
    let a = du_dx;
    let b = du_dz + dv_dz;
    libm::hypot(a, b)
}

/// Brute-force L1 distance from every pixel to the nearest seed.
pub fn oracle_l1_distance(seeds: &Raster<bool>) -> Raster<Option<u32>> {
    let pts: Vec<(usize, usize)> = seeds.indexed().filter(|(_, _, &s)| s).map(|(r, c, _)| (r, c)).collect();
    Raster::from_fn(seeds.width(), seeds.height(), |row, col| {
        pts.iter().map(|&(r, c)| (r.abs_diff(row) + c.abs_diff(col)) as u32).min()
    })
}

/// Ground point seen at pixel `(u, v)`: back-projects the pixel ray and
/// intersects it with the plane `y = camera_height` of the reference frame.
/// `None` when the ray does not reach the ground in front of the camera.
pub fn oracle_ray_ground(intr: &CameraIntrinsics, extr: &CameraExtrinsics, u: f64, v: f64) -> Option<(f64, f64)> {
    // Camera-frame direction.
    let dc = [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0];
    // Reference frame: p_ref = R^T (p_cam - t).
    let r = &extr.rotation;
    let t = &extr.translation;
    let mut origin = [0.0; 3];
    let mut dir = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            origin[i] -= r[(j, i)] * t[j];
            dir[i] += r[(j, i)] * dc[j];
        }
    }
    if dir[1].abs() < 1e-15 {
        return None;
    }
    let s = (extr.camera_height - origin[1]) / dir[1];
    (s > 0.0).then(|| (origin[0] + s * dir[0], origin[2] + s * dir[2]))
}

/// Index of the first maximum.
pub fn oracle_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_quadratic() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1];
        let g = oracle_finite_diff(f, &[1.5, -2.0], 1e-3);
        assert!((g[0] - (6.0 * 1.5 + 4.0)).abs() < 1e-8);
        assert!((g[1] - (-3.0 + 1.0)).abs() < 1e-8);
    }

    #[test]
    fn occlusion_oracle_flat_and_mirror() {
        let grid = BevGridSpec::camera_bottom_center(16, 16, 1.0).unwrap();
        let mut h = HeightMap::empty(16, 16);
        assert_eq!(oracle_occlusion(&h, &grid, 0.0).occluded.count_true(), 0);
        h.heights.set(10, 5, Some(2.0));
        let mut m = HeightMap::empty(16, 16);
        m.heights.set(10, 10, Some(2.0));
        let a = oracle_occlusion(&h, &grid, 0.0).occluded;
        let b = oracle_occlusion(&m, &grid, 0.0).occluded;
        assert!(a.count_true() > 0);
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(a.get(r, c), b.get(r, 15 - c));
            }
        }
    }

    #[test]
    fn rect_test_and_corners() {
        let c = oracle_rect_corners((0.0, 0.0), 4.0, 2.0, 0.0);
        assert!(oracle_point_in_rect(&c, (0.9, 1.9)));
        assert!(!oracle_point_in_rect(&c, (1.1, 0.0)));
        assert!(oracle_point_in_rect(&c, (1.0, 2.0)));
    }

    #[test]
    fn nms_oracle_basic() {
        let boxes = [(0, 0, 4, 4), (0, 0, 4, 4), (10, 10, 12, 12)];
        assert_eq!(oracle_nms(&boxes, &[0.8, 0.9, 0.5], 0.1, 0.3), vec![1, 2]);
    }
}
