use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Rotation3, Vector3};
use panbev::camera::{ipm_homography, CameraExtrinsics, CameraIntrinsics};
use panbev::fusion::{cross_entropy, resolve_panoptic, PanopticLogits};
use panbev::grid::BevGridSpec;
use panbev::io::{decode_label_png, encode_label_png};
use panbev::labels::{densify, occlusion_mask, HeightMap, MorphKernelTable};
use panbev::metrics::panoptic_quality;
use panbev::panoptic::{CategoryTable, ClassGroup, PanopticBevMap};
use panbev::raster::{ChannelRaster, Raster};
use panbev::synth::oracle::oracle_densify;
use panbev::weighting::{boundary_blend_weights, sensitivity_weight, ClassWeights, SensitivityMap};
use proptest::prelude::*;

fn table() -> Arc<CategoryTable> {
    Arc::new(CategoryTable::bev_default())
}

const CLASSES: [u16; 9] = [0, 1, 2, 4, 6, 10, 11, 12, 15];

fn label_map(n: usize) -> impl Strategy<Value = PanopticBevMap> {
    proptest::collection::vec((0..CLASSES.len(), 1u16..4), n * n).prop_map(move |cells| {
        let mut m = PanopticBevMap::empty(n, n, table());
        for (i, (k, inst)) in cells.into_iter().enumerate() {
            let class = CLASSES[k];
            let thing = matches!(class, 12 | 15);
            m.set(i / n, i % n, class, if thing { inst } else { 0 });
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn homography_round_trips(
        f in 200.0f64..1500.0,
        pitch in -0.1f64..0.1,
        yaw in -0.1f64..0.1,
        height in 1.0f64..3.0,
        x in -10.0f64..10.0,
        z in 3.0f64..40.0,
    ) {
        let grid = BevGridSpec::camera_bottom_center(300, 300, 0.1).unwrap();
        let intr = CameraIntrinsics::new(f, f, 640.0, 360.0, 1280, 720).unwrap();
        let rot = Rotation3::from_euler_angles(pitch, yaw, 0.0).into_inner();
        let extr = CameraExtrinsics::new(rot, Vector3::zeros(), height).unwrap();
        let h = ipm_homography(&intr, &extr, &grid).unwrap();
        let inv = h.inverse().unwrap();
        let col = (x - grid.x_min) / grid.resolution - 0.5;
        let row = (grid.z_max - z) / grid.resolution - 0.5;
        if let Some((u, v)) = inv.apply(col, row) {
            let (c2, r2) = h.apply(u, v).unwrap();
            prop_assert!((c2 - col).abs() < 1e-7 && (r2 - row).abs() < 1e-7);
        }
    }

    #[test]
    fn sensitivity_weight_decreases_with_sensitivity(
        a in 1e-6f64..1e4, b in 1e-6f64..1e4, lambda in 0.5f64..50.0,
    ) {
        let s = SensitivityMap { s: Raster::from_vec(2, 1, vec![a.min(b), a.max(b)]).unwrap() };
        let w = sensitivity_weight(&s, lambda).unwrap();
        let (lo_s, hi_s) = (*w.w.get(0, 0), *w.w.get(0, 1));
        prop_assert!(lo_s >= hi_s);
        prop_assert!(hi_s > 1.0 && lo_s <= w.cap);
    }

    #[test]
    fn blend_weights_stay_between_class_weights(m in label_map(12), w_inf in 1.5f64..9.0, radius in 1u32..8) {
        let mut cw = ClassWeights::default();
        for &c in &CLASSES[1..] {
            cw.weights.insert(c, 1.0 + f64::from(c) * 0.01);
        }
        cw.weights.insert(15, w_inf);
        cw.infrequent.insert(15);
        let out = boundary_blend_weights(&m, &cw, radius).unwrap();
        for r in 0..12 {
            for c in 0..12 {
                let cls = m.get(r, c).0;
                let got = *out.w.get(r, c);
                let own = if cls == 0 { 1.0 } else { cw.weights[&cls] };
                prop_assert!(got >= own.min(w_inf) - 1e-12 && got <= own.max(w_inf) + 1e-12);
            }
        }
    }

    #[test]
    fn raising_a_cell_never_reveals_ground(
        cells in proptest::collection::vec((0usize..24, 0usize..24, 0.05f64..2.0), 1..20),
        extra in (0usize..24, 0usize..24, 0.1f64..3.0),
    ) {
        let grid = BevGridSpec::camera_bottom_center(24, 24, 0.25).unwrap();
        let mut h = HeightMap::empty(24, 24);
        for (r, c, v) in cells {
            h.raise(r, c, v);
        }
        let before = occlusion_mask(&h, &grid);
        let mut raised = h.clone();
        raised.raise(extra.0, extra.1, h.ground_filled(extra.0, extra.1) + extra.2);
        let after = occlusion_mask(&raised, &grid);
        for (i, (&b, &a)) in before.iter().zip(after.iter()).enumerate() {
            if i != extra.0 * 24 + extra.1 {
                prop_assert!(!b || a, "cell {} revealed", i);
            }
        }
    }

    #[test]
    fn densify_matches_window_oracle(m in label_map(16)) {
        let sizes: BTreeMap<ClassGroup, (usize, usize)> = [
            (ClassGroup::TallStuff, (3, 3)),
            (ClassGroup::ShortStuff, (9, 5)),
            (ClassGroup::Vegetation, (9, 3)),
            (ClassGroup::Vehicle, (9, 5)),
            (ClassGroup::Person, (7, 5)),
        ]
        .into_iter()
        .collect();
        // Occlusion is overlaid after densification, never before.
        let mut sparse = m.clone();
        sparse.instance.as_mut_slice().fill(0);
        for c in sparse.class.as_mut_slice() {
            if *c == 11 {
                *c = 0;
            }
        }
        let dense = densify(&sparse, &MorphKernelTable::table_default()).unwrap();
        prop_assert_eq!(dense, oracle_densify(&sparse, &sizes));
    }

    #[test]
    fn pq_is_bounded_and_decomposes(gt in label_map(10), pred in label_map(10)) {
        let s = panoptic_quality(&pred, &gt).unwrap();
        for t in s.per_class.values() {
            prop_assert!((0.0..=1.0).contains(&t.pq) && (0.0..=1.0).contains(&t.sq));
            prop_assert_eq!(t.pq, t.sq * t.rq);
        }
        let same = panoptic_quality(&gt, &gt).unwrap();
        for t in same.per_class.values() {
            prop_assert_eq!(t.pq, 1.0);
        }
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_per_pixel(
        logits in proptest::collection::vec(-8.0f64..8.0, 4 * 16),
        targets in proptest::collection::vec(proptest::option::of(0usize..4), 16),
    ) {
        let pl = PanopticLogits {
            logits: ChannelRaster::from_vec(4, 4, 4, logits).unwrap(),
            stuff_classes: vec![1, 2, 4],
            instance_classes: vec![12],
            categories: table(),
        };
        let target = Raster::from_vec(4, 4, targets).unwrap();
        let (loss, grad) = cross_entropy(&pl, &target, None).unwrap();
        prop_assert!(loss >= 0.0);
        for p in 0..16 {
            let sum: f64 = (0..4).map(|ch| grad.plane(ch)[p]).sum();
            prop_assert!(sum.abs() < 1e-12);
        }
        let resolved = resolve_panoptic(&pl, 0).unwrap();
        prop_assert_eq!(resolved.width(), 4);
    }

    #[test]
    fn label_png_round_trips(m in label_map(9)) {
        let bytes = encode_label_png(&m).unwrap();
        let back = decode_label_png(&bytes, table(), Path::new("mem.png")).unwrap();
        prop_assert_eq!(back, m);
    }
}
