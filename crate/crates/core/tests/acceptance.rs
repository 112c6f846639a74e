//! Acceptance suite: one pass/fail line per criterion, exit status 1 if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Matrix3, Rotation3, Vector3};
use panbev::camera::{ipm_homography, CameraExtrinsics, CameraIntrinsics};
use panbev::commands;
use panbev::config::{PipelineConfig, Preset};
use panbev::fusion::{cross_entropy, resolve_panoptic, PanopticLogits};
use panbev::grid::BevGridSpec;
use panbev::labels::{densify, fuse_instances, occlusion_mask, Box3D, HeightMap, InstanceFusionParams, LabeledPoint, LabeledPointCloud, MorphKernelTable};
use panbev::metrics::{panoptic_quality, ConfusionMatrix};
use panbev::panoptic::{CategoryTable, ClassGroup, PanopticBevMap, VOID};
use panbev::raster::{ChannelRaster, Raster};
use panbev::synth::oracle::{
    oracle_argmax, oracle_close, oracle_densify, oracle_finite_diff, oracle_l1_distance, oracle_miou,
    oracle_occlusion, oracle_point_in_rect, oracle_pq, oracle_rect_corners, oracle_sensitivity, oracle_window,
};
use panbev::synth::{end_to_end, SceneRng, SceneSpec};
use panbev::weighting::{
    boundary_blend_weights, sensitivity_map, sensitivity_weight, weight_cap, ClassWeights, SensitivityMap,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn table() -> Arc<CategoryTable> {
    Arc::new(CategoryTable::bev_default())
}

fn golden(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

// ---------------------------------------------------------------------------

fn c1_geometry() -> Outcome {
    let t = Instant::now();
    let mut rng = SceneRng::new(101);
    let grid = BevGridSpec::camera_bottom_center(400, 400, 0.1).unwrap();
    let mut worst_px = 0.0f64;
    let mut worst_bev = 0.0f64;
    let mut worst_id = 0.0f64;
    for _ in 0..10 {
        let fx = rng.range(300.0, 1500.0);
        let fy = fx * rng.range(0.9, 1.1);
        let (w, h) = (1600usize, 900usize);
        let intr = CameraIntrinsics::new(fx, fy, rng.range(700.0, 900.0), rng.range(350.0, 550.0), w, h).unwrap();
        let rot = Rotation3::from_euler_angles(
            rng.range(-0.03, 0.03),
            rng.range(-0.08, 0.08),
            rng.range(-0.08, 0.08),
        )
        .into_inner();
        let trans = Vector3::new(rng.range(-0.2, 0.2), rng.range(-0.1, 0.1), rng.range(-0.2, 0.2));
        let cam_h = rng.range(1.2, 2.5);
        let extr = CameraExtrinsics::new(rot, trans, cam_h).unwrap();
        let hm = ipm_homography(&intr, &extr, &grid).map_err(|e| e.to_string())?;
        let inv = hm.inverse().map_err(|e| e.to_string())?;

        let prod: Matrix3<f64> = hm.matrix() * inv.matrix();
        let prod = prod / prod[(2, 2)];
        worst_id = worst_id.max((prod - Matrix3::identity()).abs().max());

        let mut n = 0;
        while n < 1000 {
            let (x, z) = (rng.range(-15.0, 15.0), rng.range(4.0, 60.0));
            // Pinhole projection written out by hand.
            let p = [x, cam_h, z];
            let mut q = [0.0; 3];
            for i in 0..3 {
                q[i] = trans[i] + (0..3).map(|j| rot[(i, j)] * p[j]).sum::<f64>();
            }
            if q[2] < 1.0 {
                continue;
            }
            n += 1;
            let u = fx * q[0] / q[2] + intr.cx;
            let v = fy * q[1] / q[2] + intr.cy;
            let (bc, br) = hm.apply(u, v).ok_or("FV->BEV failed")?;
            let col = (x - grid.x_min) / grid.resolution - 0.5;
            let row = (grid.z_max - z) / grid.resolution - 0.5;
            worst_bev = worst_bev.max((bc - col).abs().max((br - row).abs()));
            let (u2, v2) = inv.apply(bc, br).ok_or("BEV->FV failed")?;
            worst_px = worst_px.max((u2 - u).abs().max((v2 - v).abs()));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let msg = format!(
        "round trip {worst_px:.2e} px, BEV position {worst_bev:.2e} cells, |H*H^-1 - I| {worst_id:.2e}, {secs:.2} s"
    );
    check(worst_px < 1e-6 && worst_bev < 1e-6 && worst_id < 1e-9 && secs < 5.0, msg.clone())?;
    Ok(msg)
}

fn c2_sensitivity() -> Outcome {
    let t = Instant::now();
    // Reference values computed with 30-digit arithmetic.
    let anchors = [
        ((500.0, 500.0, 0.0, 1.5, 10.0), 50.5593710403917109487824688981),
        ((552.554261, 552.554261, -3.2, 1.55, 7.5), 75.4357434852630194752507717196),
    ];
    let mut worst_anchor = 0.0f64;
    for ((fx, fy, x, y, z), s_ref) in anchors {
        let g = BevGridSpec::new(1, 1, 0.5, x - 0.25, z - 0.25).unwrap();
        let intr = CameraIntrinsics::new(fx, fy, 100.0, 100.0, 200, 200).unwrap();
        let s = sensitivity_map(&intr, &g, y).unwrap();
        worst_anchor = worst_anchor.max((s.s.get(0, 0) - s_ref).abs() / s_ref);
    }
    let w_anchor = {
        let g = BevGridSpec::new(1, 1, 0.5, -3.45, 7.25).unwrap();
        let intr = CameraIntrinsics::new(552.554261, 552.554261, 100.0, 100.0, 200, 200).unwrap();
        let w = sensitivity_weight(&sensitivity_map(&intr, &g, 1.55).unwrap(), 10.0).unwrap();
        (w.w.get(0, 0) - 1.150893491800044105604144431303).abs() / 1.150893491800044105604144431303
    };
    worst_anchor = worst_anchor.max(w_anchor);

    let grid = BevGridSpec::camera_bottom_center(256, 256, 0.2).unwrap();
    let intr = CameraIntrinsics::new(552.554261, 552.554261, 682.049453, 238.769549, 1408, 376).unwrap();
    let lambda = 10.0;
    let s = sensitivity_map(&intr, &grid, 1.55).unwrap();
    let w = sensitivity_weight(&s, lambda).unwrap();
    let mut worst = 0.0f64;
    for row in 0..256 {
        for col in 0..256 {
            let x = grid.x_min + (col as f64 + 0.5) * 0.2;
            let z = grid.z_max - (row as f64 + 0.5) * 0.2;
            let s_ref = oracle_sensitivity(intr.fx, intr.fy, x, 1.55, z);
            let w_ref = 1.0 + 1.0 / libm::log1p(lambda * s_ref);
            worst = worst.max((s.s.get(row, col) - s_ref).abs() / s_ref);
            worst = worst.max((w.w.get(row, col) - w_ref).abs() / w_ref);
        }
    }
    // Weight along the optical axis (x = 0).
    let axis = BevGridSpec::new(1, 256, 0.2, -0.1, 0.0).unwrap();
    let wa = sensitivity_weight(&sensitivity_map(&intr, &axis, 1.55).unwrap(), lambda).unwrap();
    let monotone = (1..256).all(|r| wa.w.get(r - 1, 0) > wa.w.get(r, 0));

    let zero = SensitivityMap {
        s: Raster::filled(4, 4, 0.0),
    };
    let wz = sensitivity_weight(&zero, lambda).unwrap();
    let cap_ref = 100001.4999991666708333069446;
    let cap_ok = wz.w.iter().all(|v| v.is_finite() && *v == wz.cap)
        && (weight_cap(lambda) - cap_ref).abs() / cap_ref < 1e-12
        && wz.cap == weight_cap(lambda);

    let secs = t.elapsed().as_secs_f64();
    let msg = format!(
        "grid rel err {worst:.2e}, anchors {worst_anchor:.2e}, monotone {monotone}, clamp {cap_ok}, {secs:.2} s"
    );
    check(worst < 1e-9 && worst_anchor < 1e-12 && monotone && cap_ok && secs < 5.0, msg.clone())?;
    Ok(msg)
}

fn random_blob_map(rng: &mut SceneRng, w: usize, h: usize, classes: &[u16], blobs: usize) -> PanopticBevMap {
    let mut m = PanopticBevMap::empty(w, h, table());
    for _ in 0..blobs {
        let c = classes[rng.int(0, classes.len() as i64 - 1) as usize];
        let (r0, c0) = (rng.int(0, h as i64 - 1) as usize, rng.int(0, w as i64 - 1) as usize);
        let (bh, bw) = (rng.int(1, h as i64 / 3) as usize, rng.int(1, w as i64 / 3) as usize);
        for r in r0..(r0 + bh).min(h) {
            for col in c0..(c0 + bw).min(w) {
                m.set(r, col, c, 0);
            }
        }
    }
    m
}

fn c3_blend() -> Outcome {
    let mut rng = SceneRng::new(303);
    let radius = 20u32;
    let (car, road, terrain) = (12u16, 1u16, 4u16);
    let mut max_excess = f64::NEG_INFINITY;
    let mut endpoint_fail = 0usize;
    let mut oracle_fail = 0usize;
    let mut endpoints_seen = [0usize; 2];
    for _ in 0..50 {
        let mut m = random_blob_map(&mut rng, 96, 96, &[road, terrain], 12);
        for r in 0..96 {
            for c in 0..96 {
                if m.get(r, c).0 == VOID {
                    m.set(r, c, road, 0);
                }
            }
        }
        for _ in 0..rng.int(1, 3) {
            let (r0, c0) = (rng.int(0, 90) as usize, rng.int(0, 90) as usize);
            for r in r0..r0 + 5 {
                for c in c0..c0 + 4 {
                    m.set(r, c, car, 1);
                }
            }
        }
        let w_inf = rng.range(2.0, 8.0);
        let mut cw = ClassWeights::default();
        cw.weights.insert(car, w_inf);
        cw.weights.insert(road, rng.range(1.0, 1.5));
        cw.weights.insert(terrain, rng.range(1.0, 1.5));
        cw.infrequent.insert(car);
        let out = boundary_blend_weights(&m, &cw, radius).map_err(|e| e.to_string())?;

        let dist = oracle_l1_distance(&m.class.map(|&c| c == car));
        let own = |r: usize, c: usize| cw.weights[&m.get(r, c).0];
        for r in 0..96 {
            for c in 0..96 {
                let got = *out.w.get(r, c);
                let cls = m.get(r, c).0;
                let expect = if cls == car {
                    w_inf
                } else {
                    match dist.get(r, c) {
                        Some(d) if (*d as u32) <= radius => {
                            let d = (d - 1) as f64;
                            w_inf + (own(r, c) - w_inf) * d / radius as f64
                        }
                        _ => own(r, c),
                    }
                };
                if (got - expect).abs() > 1e-12 {
                    oracle_fail += 1;
                }
                match dist.get(r, c) {
                    Some(1) if cls != car => {
                        endpoints_seen[0] += 1;
                        endpoint_fail += usize::from(got != w_inf);
                    }
                    Some(d) if cls != car && *d == radius + 1 => {
                        endpoints_seen[1] += 1;
                        endpoint_fail += usize::from(got != own(r, c));
                    }
                    _ => {}
                }
                // Jumps inside one frequent class.
                for (r2, c2) in [(r + 1, c), (r, c + 1)] {
                    if r2 >= 96 || c2 >= 96 {
                        continue;
                    }
                    let c2cls = m.get(r2, c2).0;
                    let same_freq = cls == c2cls && cls != car;
                    let touching = (cls == car) != (c2cls == car);
                    if !(same_freq || touching) {
                        continue;
                    }
                    let freq = if cls == car { own(r2, c2) } else { own(r, c) };
                    let bound = (w_inf - freq) / radius as f64 + 1e-9;
                    let jump = (got - out.w.get(r2, c2)).abs();
                    max_excess = max_excess.max(jump - bound);
                }
            }
        }
    }
    let msg = format!(
        "endpoints checked {}/{} (failures {endpoint_fail}), oracle mismatches {oracle_fail}, max jump minus bound {max_excess:.2e}",
        endpoints_seen[0], endpoints_seen[1]
    );
    check(
        endpoint_fail == 0 && oracle_fail == 0 && max_excess <= 0.0 && endpoints_seen.iter().all(|&n| n > 0),
        msg.clone(),
    )?;
    Ok(msg)
}

fn random_heights(rng: &mut SceneRng, n: usize) -> HeightMap {
    let mut h = HeightMap::empty(n, n);
    for _ in 0..rng.int(3, 10) {
        let (r0, c0) = (rng.int(0, n as i64 - 1) as usize, rng.int(0, n as i64 - 1) as usize);
        let (bh, bw) = (rng.int(1, 6) as usize, rng.int(1, 6) as usize);
        let v = rng.range(0.1, 2.5);
        for r in r0..(r0 + bh).min(n) {
            for c in c0..(c0 + bw).min(n) {
                h.raise(r, c, v);
            }
        }
    }
    for _ in 0..rng.int(0, 40) {
        let (r, c) = (rng.int(0, n as i64 - 1) as usize, rng.int(0, n as i64 - 1) as usize);
        h.raise(r, c, rng.range(0.0, 0.3));
    }
    h
}

fn c4_occlusion() -> Outcome {
    let t = Instant::now();
    let mut rng = SceneRng::new(404);
    let grid = BevGridSpec::camera_bottom_center(64, 64, 0.25).unwrap();
    let (mut flags, mut off_tie, mut ties) = (0usize, 0usize, 0usize);
    for _ in 0..100 {
        let h = random_heights(&mut rng, 64);
        let got = occlusion_mask(&h, &grid);
        let want = oracle_occlusion(&h, &grid, 0.0);
        for i in 0..got.len() {
            ties += usize::from(want.tie.as_slice()[i]);
            if got.as_slice()[i] != want.occluded.as_slice()[i] {
                flags += 1;
                off_tie += usize::from(!want.tie.as_slice()[i]);
            }
        }
    }
    let total = 100 * 64 * 64;
    let frac = flags as f64 / total as f64;

    let mut violations = 0usize;
    for _ in 0..20 {
        let h = random_heights(&mut rng, 64);
        let before = occlusion_mask(&h, &grid);
        let (r, c) = (rng.int(0, 63) as usize, rng.int(0, 63) as usize);
        let mut raised = h.clone();
        raised.raise(r, c, h.ground_filled(r, c) + rng.range(0.1, 2.0));
        let after = occlusion_mask(&raised, &grid);
        for (i, (&b, &a)) in before.iter().zip(after.iter()).enumerate() {
            if i != r * 64 + c && b && !a {
                violations += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let msg = format!(
        "{flags} disagreements ({:.3}%, {off_tie} off tie cells, {ties} tie cells), {violations} monotonicity violations, {secs:.1} s",
        100.0 * frac
    );
    check(off_tie == 0 && frac < 0.005 && violations == 0 && secs < 60.0, msg.clone())?;
    Ok(msg)
}

/// Instance fusion rebuilt from the oracles: rotated-rectangle tests, window
/// morphology and brute-force connected components.
fn oracle_fuse(
    map: &PanopticBevMap,
    boxes: &[Box3D],
    dynamic: &[LabeledPoint],
    grid: &BevGridSpec,
    sizes: &BTreeMap<ClassGroup, (usize, usize)>,
    margin: usize,
) -> PanopticBevMap {
    let (w, h) = (grid.cells_x, grid.cells_z);
    let res = grid.resolution;
    let cats = map.categories.clone();
    let mut out = map.clone();
    let mut order: Vec<&Box3D> = boxes.iter().collect();
    order.sort_by(|a, b| {
        let da = a.center[0] * a.center[0] + a.center[2] * a.center[2];
        let db = b.center[0] * b.center[0] + b.center[2] * b.center[2];
        da.total_cmp(&db).then(a.instance_id.cmp(&b.instance_id))
    });
    let mut claimed: Vec<Option<u16>> = vec![None; w * h];
    let mut next = 1u16;
    for b in order {
        let corners = oracle_rect_corners((b.center[0], b.center[2]), b.dims[0], b.dims[1], b.yaw);
        let mut any = false;
        for r in 0..h {
            for c in 0..w {
                let p = (grid.x_min + (c as f64 + 0.5) * res, grid.z_max - (r as f64 + 0.5) * res);
                if claimed[r * w + c].is_none() && oracle_point_in_rect(&corners, p) {
                    claimed[r * w + c] = Some(b.class_id);
                    out.set(r, c, b.class_id, next);
                    any = true;
                }
            }
        }
        if any {
            next += 1;
        }
    }
    let mut sparse: BTreeMap<u16, Raster<bool>> = BTreeMap::new();
    for p in dynamic {
        let col = ((p.position[0] - grid.x_min) / res).floor();
        let row = ((grid.z_max - p.position[2]) / res).floor();
        if col >= 0.0 && row >= 0.0 && (col as usize) < w && (row as usize) < h {
            sparse
                .entry(p.class_id)
                .or_insert_with(|| Raster::filled(w, h, false))
                .set(row as usize, col as usize, true);
        }
    }
    let mut free = vec![0u16; w * h];
    let mut near = BTreeMap::new();
    for (&class, mask) in &sparse {
        let (d, e) = sizes[&cats.group(class).unwrap()];
        let closed = oracle_close(mask, d, e);
        let boxes_mask = Raster::from_vec(w, h, claimed.iter().map(|c| *c == Some(class)).collect()).unwrap();
        near.insert(class, oracle_window(&boxes_mask, 2 * margin + 1, false));
        for i in 0..w * h {
            if closed.as_slice()[i] && claimed[i].is_none() && free[i] == 0 {
                free[i] = class;
            }
        }
    }
    // Component label = smallest pixel index reachable, by relaxation.
    let mut label: Vec<usize> = (0..w * h).collect();
    loop {
        let mut changed = false;
        for i in 0..w * h {
            if free[i] == 0 {
                continue;
            }
            let (r, c) = (i / w, i % w);
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(i - w);
            }
            if r + 1 < h {
                nb.push(i + w);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if free[j] == free[i] && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = (0..w * h).filter(|&i| free[i] != 0 && label[i] == i).collect();
    roots.sort();
    for root in roots {
        let members: Vec<usize> = (0..w * h).filter(|&i| free[i] != 0 && label[i] == root).collect();
        let class = free[root];
        if members.iter().any(|&i| near[&class].as_slice()[i]) {
            continue;
        }
        for &i in &members {
            out.set(i / w, i % w, class, next);
        }
        next += 1;
    }
    out
}

fn c5_morphology() -> Outcome {
    let mut rng = SceneRng::new(505);
    let kernels = MorphKernelTable::table_default();
    let sizes: BTreeMap<ClassGroup, (usize, usize)> = [
        (ClassGroup::TallStuff, (3, 3)),
        (ClassGroup::ShortStuff, (9, 5)),
        (ClassGroup::Vegetation, (9, 3)),
        (ClassGroup::Vehicle, (9, 5)),
        (ClassGroup::Person, (7, 5)),
    ]
    .into_iter()
    .collect();
    let grid = BevGridSpec::camera_bottom_center(64, 64, 0.25).unwrap();
    let classes = [1u16, 2, 4, 6, 7, 10, 12, 15];
    let (mut dens_fail, mut fuse_fail, mut veg_fail) = (0usize, 0usize, 0usize);
    for _ in 0..50 {
        let mut sparse = PanopticBevMap::empty(64, 64, table());
        let blobs = random_blob_map(&mut rng, 64, 64, &classes, 10);
        for i in 0..64 * 64 {
            if rng.uniform() < 0.3 {
                sparse.class.as_mut_slice()[i] = blobs.class.as_slice()[i];
            }
        }
        let dense = densify(&sparse, &kernels).map_err(|e| e.to_string())?;
        if dense != oracle_densify(&sparse, &sizes) {
            dens_fail += 1;
        }
        for i in 0..64 * 64 {
            let (s, d) = (sparse.class.as_slice()[i], dense.class.as_slice()[i]);
            if (d == 10 && s != VOID && s != 10) || (s == 10 && d != 10) {
                veg_fail += 1;
            }
        }

        let mut boxes = Vec::new();
        for k in 0..rng.int(0, 6) {
            let person = rng.uniform() < 0.3;
            boxes.push(Box3D {
                center: [rng.range(-7.0, 7.0), 0.8, rng.range(1.0, 15.0)],
                dims: if person {
                    [rng.range(0.5, 0.9), rng.range(0.5, 0.9), 1.7]
                } else {
                    [rng.range(3.5, 4.8), rng.range(1.6, 2.0), 1.5]
                },
                yaw: rng.range(-3.1, 3.1),
                class_id: if person { 15 } else { 12 },
                instance_id: k as u16 + 1,
                frame: 0,
            });
        }
        let mut points = Vec::new();
        for _ in 0..rng.int(0, 4) {
            let (cx, cz) = (rng.range(-7.0, 7.0), rng.range(1.0, 15.0));
            let class = if rng.uniform() < 0.5 { 12 } else { 15 };
            for _ in 0..60 {
                points.push(LabeledPoint {
                    position: [cx + rng.range(-1.0, 1.0), 1.0, cz + rng.range(-1.0, 1.0)],
                    class_id: class,
                    instance_id: 1,
                    dynamic: true,
                    frame: 0,
                });
            }
        }
        let params = InstanceFusionParams::default();
        let fused = fuse_instances(
            &dense,
            &boxes,
            &LabeledPointCloud::new(points.clone()),
            &grid,
            &kernels,
            params,
        )
        .map_err(|e| e.to_string())?;
        if fused != oracle_fuse(&dense, &boxes, &points, &grid, &sizes, params.box_margin_cells) {
            fuse_fail += 1;
        }
    }
    let msg = format!("densify mismatches {dens_fail}/50, fuse mismatches {fuse_fail}/50, vegetation precedence violations {veg_fail}");
    check(dens_fail == 0 && fuse_fail == 0 && veg_fail == 0, msg.clone())?;
    Ok(msg)
}

fn random_panoptic(rng: &mut SceneRng, n: usize) -> PanopticBevMap {
    let mut m = random_blob_map(rng, n, n, &[1, 2, 4, 7, 10], 8);
    for k in 1..=rng.int(0, 5) as u16 {
        let class = if rng.uniform() < 0.6 { 12 } else { 15 };
        let (r0, c0) = (rng.int(0, n as i64 - 4) as usize, rng.int(0, n as i64 - 4) as usize);
        let (bh, bw) = (rng.int(2, 8) as usize, rng.int(2, 8) as usize);
        for r in r0..(r0 + bh).min(n) {
            for c in c0..(c0 + bw).min(n) {
                m.set(r, c, class, k);
            }
        }
    }
    m
}

fn perturb(rng: &mut SceneRng, gt: &PanopticBevMap) -> PanopticBevMap {
    let mut p = gt.clone();
    let n = gt.width();
    // Shift the whole map by up to one pixel, then flip random pixels.
    let (dr, dc) = (rng.int(-1, 1), rng.int(-1, 1));
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = (r as i64 - dr, c as i64 - dc);
            if sr >= 0 && sc >= 0 && (sr as usize) < n && (sc as usize) < n {
                let (cl, i) = gt.get(sr as usize, sc as usize);
                p.set(r, c, cl, i);
            }
        }
    }
    for _ in 0..rng.int(0, 120) {
        let (r, c) = (rng.int(0, n as i64 - 1) as usize, rng.int(0, n as i64 - 1) as usize);
        let choice = rng.int(0, 3);
        match choice {
            0 => p.set(r, c, VOID, 0),
            1 => p.set(r, c, 2, 0),
            2 => p.set(r, c, 12, 7),
            _ => p.set(r, c, 4, 0),
        }
    }
    p
}

fn c6_metrics() -> Outcome {
    let mut rng = SceneRng::new(606);
    let mut worst = 0.0f64;
    let mut decomposition_fail = 0usize;
    let mut tp_seen = 0usize;
    for _ in 0..200 {
        let gt = random_panoptic(&mut rng, 32);
        let pred = perturb(&mut rng, &gt);
        let s = panoptic_quality(&pred, &gt).map_err(|e| e.to_string())?;
        let o = oracle_pq(&pred, &gt);
        if s.per_class.keys().ne(o.per_class.keys()) {
            return Err("class sets differ from oracle".into());
        }
        for (c, t) in &s.per_class {
            let r = &o.per_class[c];
            worst = worst.max((t.pq - r.pq).abs()).max((t.sq - r.sq).abs()).max((t.rq - r.rq).abs());
            decomposition_fail += usize::from(t.pq != t.sq * t.rq);
            tp_seen += usize::from(t.rq > 0.0);
        }
        for (a, b) in [
            (s.aggregate.all, o.all),
            (s.aggregate.things, o.things),
            (s.aggregate.stuff, o.stuff),
        ] {
            worst = worst.max((a.pq - b.pq).abs()).max((a.sq - b.sq).abs()).max((a.rq - b.rq).abs());
        }
        let m = ConfusionMatrix::from_rasters(&pred.class, &gt.class).map_err(|e| e.to_string())?.miou();
        let (om, omean) = oracle_miou(&pred.class, &gt.class);
        if m.per_class.keys().ne(om.keys()) {
            return Err("mIoU class sets differ from oracle".into());
        }
        for (c, v) in &m.per_class {
            worst = worst.max((v - om[c]).abs());
        }
        worst = worst.max((m.mean - omean).abs());
    }

    // One car matched at IoU 0.6 plus one false-positive car.
    let mut gt = PanopticBevMap::empty(10, 3, table());
    let mut pred = PanopticBevMap::empty(10, 3, table());
    for c in 0..10 {
        gt.set(0, c, 12, 1);
        for r in 1..3 {
            gt.set(r, c, 1, 0);
            pred.set(r, c, 1, 0);
        }
    }
    for c in 0..6 {
        pred.set(0, c, 12, 1);
    }
    for c in 6..10 {
        pred.set(2, c, 12, 2);
    }
    let fixture = panoptic_quality(&pred, &gt).map_err(|e| e.to_string())?.per_class[&12];
    let fixture_ok = (fixture.pq - 0.4).abs() < 1e-15 && (fixture.sq - 0.6).abs() < 1e-15;

    let msg = format!(
        "max |prod - oracle| {worst:.2e}, PQ != SQ*RQ in {decomposition_fail} classes ({tp_seen} with matches), fixture PQ {:.15}",
        fixture.pq
    );
    check(worst < 1e-12 && decomposition_fail == 0 && fixture_ok && tp_seen > 0, msg.clone())?;
    Ok(msg)
}

fn random_logits(rng: &mut SceneRng, n: usize, stuff: &[u16], instances: &[u16], scale: f64) -> PanopticLogits {
    let nc = stuff.len() + instances.len();
    let data = (0..nc * n * n).map(|_| scale * rng.normal()).collect();
    PanopticLogits {
        logits: ChannelRaster::from_vec(n, n, nc, data).unwrap(),
        stuff_classes: stuff.to_vec(),
        instance_classes: instances.to_vec(),
        categories: table(),
    }
}

fn c7_fusion() -> Outcome {
    let mut rng = SceneRng::new(707);
    let stuff = [1u16, 2, 4, 7];
    let inst = [12u16, 12, 15];
    let nc = stuff.len() + inst.len();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let pl = random_logits(&mut rng, 8, &stuff, &inst, 1.5);
        let target = Raster::from_fn(8, 8, |_, _| {
            (rng.uniform() < 0.85).then(|| rng.int(0, nc as i64 - 1) as usize)
        });
        let weights = panbev::weighting::WeightMap {
            w: Raster::from_fn(8, 8, |_, _| rng.range(0.5, 3.0)),
            kind: panbev::weighting::WeightKind::Combined,
            cap: 3.0,
        };
        let (_, grad) = cross_entropy(&pl, &target, Some(&weights)).map_err(|e| e.to_string())?;
        let f = |x: &[f64]| {
            let mut p = pl.clone();
            p.logits.as_mut_slice().copy_from_slice(x);
            cross_entropy(&p, &target, Some(&weights)).unwrap().0
        };
        let fd = oracle_finite_diff(f, pl.logits.as_slice(), 1e-3);
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (g, d) in grad.as_slice().iter().zip(&fd) {
            worst = worst.max((g - d).abs() / d.abs().max(g.abs()).max(1e-3 * scale));
        }
    }

    let mut uniform_err = 0.0f64;
    for c in [2usize, 5, 19] {
        let pl = PanopticLogits {
            logits: ChannelRaster::from_vec(8, 8, c, vec![0.37; c * 64]).unwrap(),
            stuff_classes: stuff.iter().copied().cycle().take(c).collect(),
            instance_classes: vec![],
            categories: table(),
        };
        let target = Raster::from_fn(8, 8, |r, col| Some((r + col) % c));
        let loss = cross_entropy(&pl, &target, None).map_err(|e| e.to_string())?.0;
        uniform_err = uniform_err.max((loss - (c as f64).ln()).abs());
    }

    let mut argmax_fail = 0usize;
    for _ in 0..20 {
        let pl = random_logits(&mut rng, 16, &stuff, &inst, 3.0);
        let mut shifted = pl.clone();
        for p in 0..256 {
            let k = rng.range(-50.0, 50.0);
            for ch in 0..nc {
                shifted.logits.plane_mut(ch)[p] += k;
            }
        }
        for ch_row in 0..256 {
            let a: Vec<f64> = (0..nc).map(|ch| pl.logits.plane(ch)[ch_row]).collect();
            let b: Vec<f64> = (0..nc).map(|ch| shifted.logits.plane(ch)[ch_row]).collect();
            argmax_fail += usize::from(oracle_argmax(&a) != oracle_argmax(&b));
        }
        let min_px = rng.int(0, 20) as usize;
        let a = resolve_panoptic(&pl, min_px).map_err(|e| e.to_string())?;
        let b = resolve_panoptic(&shifted, min_px).map_err(|e| e.to_string())?;
        argmax_fail += usize::from(a != b);
    }
    let msg = format!(
        "gradient max rel err {worst:.2e}, uniform loss err {uniform_err:.2e}, argmax changes under shift {argmax_fail}"
    );
    check(worst < 1e-4 && uniform_err < 1e-9 && argmax_fail == 0, msg.clone())?;
    Ok(msg)
}

fn c8_end_to_end() -> Outcome {
    let sigmas = [0.0, 0.02, 0.05];
    let mut medians = Vec::new();
    let mut min_clean = f64::INFINITY;
    for &sigma in &sigmas {
        let mut pqs = Vec::new();
        for seed in 0..20u64 {
            let mut spec = SceneSpec::default();
            spec.seed = seed;
            spec.lidar.noise_sigma = sigma;
            let e = end_to_end(&spec, 0.2).map_err(|e| e.to_string())?;
            pqs.push(e.scores.aggregate.all.pq);
        }
        if sigma == 0.0 {
            min_clean = pqs.iter().copied().fold(f64::INFINITY, f64::min);
        }
        pqs.sort_by(f64::total_cmp);
        medians.push(0.5 * (pqs[9] + pqs[10]));
    }
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let msg = format!(
        "min PQ at sigma 0: {min_clean:.4}; medians {:.4} / {:.4} / {:.4}",
        medians[0], medians[1], medians[2]
    );
    check(min_clean >= 0.95 && monotone, msg.clone())?;
    Ok(msg)
}

fn c9_config() -> Outcome {
    let mut notes = Vec::new();
    for (preset, file, rows, cols, res, nms, score) in [
        (Preset::Kitti360, "kitti360.toml", 768, 704, "0.074", "0.3", "0.1"),
        (Preset::Nuscenes, "nuscenes.toml", 896, 768, "0.077", "0.2", "0.3"),
    ] {
        let dump = PipelineConfig::resolve(Some(preset), None, &[]).map_err(|e| e.to_string())?.to_toml();
        let expected = std::fs::read_to_string(golden(file)).map_err(|e| e.to_string())?;
        check(dump == expected, format!("{file}: dump differs from the golden file"))?;
        for line in [
            format!("rows = {rows}\n"),
            format!("cols = {cols}\n"),
            format!("resolution = {res}\n"),
            "dilation = [3, 9, 9, 9, 7]\n".to_string(),
            "erosion = [3, 5, 3, 5, 5]\n".to_string(),
            "rpn_nms_threshold = 0.7\n".to_string(),
            format!("nms_threshold = {nms}\n"),
            format!("score_threshold = {score}\n"),
        ] {
            check(dump.contains(&line), format!("{file}: missing `{}`", line.trim()))?;
        }
        notes.push(format!("{file} {rows}x{cols} @ {res}"));
    }
    Ok(format!("{} byte-exact", notes.join(", ")))
}

fn strip_timings(manifest: &str) -> String {
    manifest.lines().filter(|l| !l.trim_start().starts_with("\"millis\"")).collect::<Vec<_>>().join("\n")
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let quiet = |_: &str| {};
    let scene = tmp.path().join("scene");
    commands::synth(&SceneSpec::default(), &scene, &quiet).map_err(|e| e.to_string())?;
    let hash = panbev::io::sha256_hex(&std::fs::read(scene.join("manifest.json")).map_err(|e| e.to_string())?);
    let pinned = std::fs::read_to_string(golden("synth_seed0_manifest.sha256")).map_err(|e| e.to_string())?;
    check(hash == pinned.trim(), format!("synth seed 0 manifest {hash} != pinned {}", pinned.trim()))?;

    let cfg = PipelineConfig::resolve(None, Some(&scene.join("config.toml")), &[]).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (run, workers) in [(0, 1), (1, 3)] {
        let out = tmp.path().join(format!("run{run}"));
        commands::labelgen(&cfg, &scene, &out, workers, &quiet).map_err(|e| e.to_string())?;
        let mut files = BTreeMap::new();
        for f in panbev::io::list_files(&out.join("labels"), "png")
            .into_iter()
            .chain(panbev::io::list_files(&out.join("labels"), "json"))
            .flatten()
        {
            files.insert(f.file_name().unwrap().to_owned(), std::fs::read(&f).unwrap());
        }
        let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
        outputs.push((files, strip_timings(&manifest)));
    }
    check(!outputs[0].0.is_empty(), "labelgen wrote no labels")?;
    check(outputs[0] == outputs[1], "labelgen outputs differ between runs")?;
    Ok(format!(
        "{} label files identical across runs, synth manifest {}",
        outputs[0].0.len(),
        &hash[..16]
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("geometry", c1_geometry),
        ("sensitivity", c2_sensitivity),
        ("weighting", c3_blend),
        ("occlusion", c4_occlusion),
        ("morphology + instances", c5_morphology),
        ("metrics", c6_metrics),
        ("fusion", c7_fusion),
        ("end-to-end", c8_end_to_end),
        ("config parity", c9_config),
        ("determinism", c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("criterion {:>2} {name}: PASS ({msg}) [{secs:.1} s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({msg}) [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
