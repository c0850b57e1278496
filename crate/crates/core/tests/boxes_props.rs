//! Property tests for box arithmetic, anchor layout, and NMS, with a
//! brute-force NMS reference for exact comparison.

use proptest::prelude::*;
use rgbt_detect::boxes::{decode_box, encode_box, iou, BBox, Detection, GroundTruth};
use rgbt_detect::head::{generate_anchors, match_anchors, nms, AnchorAssignment, AnchorConfig};

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..500.0f64, 0.0..400.0f64, 1.0..120.0f64, 1.0..160.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn encode_decode_round_trips(gt in arb_box(), anchor in arb_box()) {
        let off = encode_box(&gt, &anchor).unwrap();
        let back = decode_box(&off, &anchor).unwrap();
        prop_assert!((back.x_min - gt.x_min).abs() < 1e-9);
        prop_assert!((back.y_min - gt.y_min).abs() < 1e-9);
        prop_assert!((back.x_max - gt.x_max).abs() < 1e-9);
        prop_assert!((back.y_max - gt.y_max).abs() < 1e-9);
    }

    #[test]
    fn zero_offsets_decode_to_the_anchor(anchor in arb_box()) {
        let b = decode_box(&[0.0; 4], &anchor).unwrap();
        prop_assert!((b.x_min - anchor.x_min).abs() < 1e-9);
        prop_assert!((b.y_max - anchor.y_max).abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_bounded_and_exact_on_self(a in arb_box(), b in arb_box()) {
        let ab = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou(a in arb_box(), dx in 1.0..50.0f64) {
        let b = BBox::new(a.x_max + dx, a.y_min, a.x_max + dx + 10.0, a.y_max).unwrap();
        prop_assert_eq!(iou(&a, &b), 0.0);
    }
}

/// O(n²) reference NMS: keep a detection iff it overlaps no higher-ranked
/// kept detection, rank = confidence descending with input order on ties.
fn reference_nms(dets: &[Detection], thresh: f64, top_k: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence().total_cmp(&dets[a].confidence()));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|&j| iou(&dets[i].bbox, &dets[j].bbox) < thresh) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

fn arb_detections() -> impl Strategy<Value = Vec<Detection>> {
    proptest::collection::vec(
        (0..8u32, 0..6u32, 1..3u32, 1..3u32, 0..20u32, 0..10u32),
        0..30,
    )
    .prop_map(|raw| {
        raw.into_iter()
            .map(|(gx, gy, gw, gh, sr, st)| Detection {
                // Grid-aligned boxes make overlaps and exact ties common.
                bbox: BBox::new(
                    gx as f64 * 10.0,
                    gy as f64 * 20.0,
                    gx as f64 * 10.0 + gw as f64 * 15.0,
                    gy as f64 * 20.0 + gh as f64 * 30.0,
                )
                .unwrap(),
                score_rgb: sr as f64 / 20.0,
                score_thermal: st as f64 / 10.0,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn nms_matches_the_quadratic_reference(dets in arb_detections(), k in 1usize..25) {
        let got = nms(&dets, 0.45, k);
        let want = reference_nms(&dets, 0.45, k);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(g, w);
        }
    }

    #[test]
    fn nms_survivors_are_mutually_below_threshold(dets in arb_detections()) {
        let kept = nms(&dets, 0.45, 200);
        for i in 0..kept.len() {
            for j in 0..i {
                prop_assert!(iou(&kept[i].bbox, &kept[j].bbox) < 0.45);
            }
        }
        // Output confidences are non-increasing.
        for w in kept.windows(2) {
            prop_assert!(w[0].confidence() >= w[1].confidence());
        }
    }
}

#[test]
fn default_geometry_produces_the_documented_anchor_grid() {
    let shapes = [(64, 80), (32, 40), (16, 20)];
    let strides = [8, 16, 32];
    let spec = AnchorConfig::default();
    let anchors = generate_anchors(&shapes, &strides, &spec, 512, 640).unwrap();
    assert_eq!(anchors.len(), 3 * (64 * 80 + 32 * 40 + 16 * 20));
    assert_eq!(anchors.len(), 20160);
    // First cell, first ratio: centered at (4,4) with scale 64, ratio 1/0.41,
    // clipped to the image.
    let r: f64 = 1.0 / 0.41;
    let (ah, aw) = (64.0 * r.sqrt(), 64.0 / r.sqrt());
    let a0 = anchors[0];
    assert_eq!(a0.x_min, 0.0_f64.max(4.0 - aw / 2.0));
    assert_eq!(a0.x_max, 4.0 + aw / 2.0);
    assert_eq!(a0.y_max, 4.0 + ah / 2.0);
    // Ratio is the fastest-varying axis; at an interior cell (no clipping)
    // all three ratios share their center exactly.
    let base = ((32 * 80) + 40) * 3; // level 0, row 32, column 40
    let want_center = ((40.0 + 0.5) * 8.0, (32.0 + 0.5) * 8.0);
    for k in 0..3 {
        assert_eq!(anchors[base + k].center(), want_center);
    }
    // Sizes follow the ratio list at the level scale.
    for (k, &r) in [1.0 / 0.41, 2.0, 3.0f64].iter().enumerate() {
        let a = anchors[base + k];
        assert!((a.height() - 64.0 * r.sqrt()).abs() < 1e-9);
        assert!((a.width() - 64.0 / r.sqrt()).abs() < 1e-9);
    }
    // Next column is one stride right, next row one stride down.
    assert_eq!(anchors[base + 3].center(), (want_center.0 + 8.0, want_center.1));
    assert_eq!(anchors[base + 80 * 3].center(), (want_center.0, want_center.1 + 8.0));
    // The second level starts after 64·80·3 anchors, at scale 128, stride 16.
    let l1 = anchors[64 * 80 * 3];
    let r0: f64 = 1.0 / 0.41;
    assert!((l1.x_max - (8.0 + 128.0 / r0.sqrt() / 2.0)).abs() < 1e-9);
    assert!((l1.y_max - (8.0 + 128.0 * r0.sqrt() / 2.0)).abs() < 1e-9);
}

#[test]
fn every_ground_truth_claims_an_anchor_even_below_the_iou_threshold() {
    let shapes = [(8, 8)];
    let strides = [8];
    let spec = AnchorConfig { scales: vec![16.0], ratios: vec![2.0] };
    let anchors = generate_anchors(&shapes, &strides, &spec, 64, 64).unwrap();
    // A tiny box overlapping every anchor weakly still gets matched.
    let gts = vec![
        GroundTruth {
            bbox: BBox::new(30.0, 30.0, 33.0, 36.0).unwrap(),
            visible_rgb: true,
            visible_thermal: true,
            is_ignore: false,
        },
        GroundTruth {
            bbox: BBox::new(10.0, 8.0, 20.0, 28.0).unwrap(),
            visible_rgb: true,
            visible_thermal: true,
            is_ignore: false,
        },
    ];
    let assign = match_anchors(&anchors, &gts, 0.5);
    for gi in 0..gts.len() {
        assert!(
            assign.iter().any(|a| *a == AnchorAssignment::Positive(gi)),
            "gt {gi} unmatched"
        );
    }
    // Ignored gts claim nothing.
    let mut gts2 = gts.clone();
    gts2[0].is_ignore = true;
    let assign2 = match_anchors(&anchors, &gts2, 0.5);
    assert!(!assign2.iter().any(|a| *a == AnchorAssignment::Positive(0)));
}

#[test]
fn anchors_are_clipped_inside_the_image() {
    let anchors = generate_anchors(&[(16, 20)], &[32], &AnchorConfig {
        scales: vec![256.0],
        ratios: vec![3.0],
    }, 512, 640)
    .unwrap();
    for a in &anchors {
        assert!(a.x_min >= 0.0 && a.y_min >= 0.0);
        assert!(a.x_max <= 640.0 && a.y_max <= 512.0);
        assert!(a.is_valid());
    }
}
