mod common;

use common::*;
use orient_geo::eval::*;
use orient_geo::so3::{EulerZXZ, Rotation};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check_against_oracle(dets: &[Detection], gts: &[GroundTruth]) {
    let dev = metric_oracle_deviation(dets, gts);
    assert!(dev <= 1e-9, "deviation {dev}");
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (d, g) = random_detection_set(&mut r);
        check_against_oracle(&d, &g);
    }
}

#[test]
fn med_err_matches_sort_oracle_on_1000_records() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let recs: Vec<EvalRecord> = (0..1000)
        .map(|i| {
            let t = Rotation::random(&mut r);
            let p = Rotation::random(&mut r);
            EvalRecord::new(if i % 2 == 0 { "car" } else { "bus" }, t, p)
        })
        .collect();
    let cats = vec!["bus".to_string(), "car".to_string()];
    let got = med_err(&recs, &cats).unwrap();
    for c in &cats {
        let e: Vec<f64> = recs.iter().filter(|x| &x.category == c).map(|x| x.error_deg()).collect();
        assert_eq!(got.get(c).unwrap(), oracle_median(&e));
    }
}

#[test]
fn metrics_ignore_record_order() {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let (mut d, g) = random_detection_set(&mut r);
        // distinct scores: tie-breaking legitimately depends on order
        for (i, x) in d.iter_mut().enumerate() {
            x.score += i as f64 * 1e-6;
        }
        let a = (arp(&d, &g, 30.0), avp(&d, &g, 8, 0.0).unwrap(), detection_analysis(&d, &g));
        let mut d2 = d.clone();
        let mut g2 = g.clone();
        d2.shuffle(&mut r);
        g2.shuffle(&mut r);
        let b = (arp(&d2, &g2, 30.0), avp(&d2, &g2, 8, 0.0).unwrap(), detection_analysis(&d2, &g2));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2 .1.detected, b.2 .1.detected);
        assert_eq!(a.2 .1.correct, b.2 .1.correct);
    }
}

#[test]
fn pose_metrics_are_bounded_by_detection() {
    let mut r = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let (d, g) = random_detection_set(&mut r);
        let ap = detection_ap(&d, &g);
        let arp_v = arp(&d, &g, 30.0);
        for (c, v) in &arp_v.per_category {
            assert!(*v <= ap.get(c).unwrap() + 1e-12);
        }
        let (per, _) = detection_analysis(&d, &g);
        for a in per.values() {
            assert!(a.correct <= a.detected);
            assert!((0.0..=1.0).contains(&a.detected));
        }
        // nested bins can only lose matches
        for (coarse, fine) in [(4, 8), (8, 16), (8, 24)] {
            let c = avp(&d, &g, coarse, 0.0).unwrap();
            let f = avp(&d, &g, fine, 0.0).unwrap();
            for (cat, v) in &f.per_category {
                assert!(*v <= c.get(cat).unwrap() + 1e-12);
            }
        }
    }
}

#[test]
fn perfect_predictions_make_avp_equal_ap() {
    let mut r = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let (mut d, g) = random_detection_set(&mut r);
        for x in d.iter_mut() {
            // give every detection the pose of a same-category ground truth it overlaps most
            if let Some(best) = g
                .iter()
                .filter(|y| y.category == x.category)
                .max_by(|a, b| iou(&x.bbox, &a.bbox).total_cmp(&iou(&x.bbox, &b.bbox)))
            {
                x.rotation = best.rotation;
            }
        }
        let (per, _) = detection_analysis(&d, &g);
        if per.values().any(|a| a.correct < a.detected) {
            continue;
        }
        let ap = detection_ap(&d, &g);
        for k in [4, 8, 16, 24] {
            let v = avp(&d, &g, k, 0.0).unwrap();
            for (c, x) in &v.per_category {
                let gimbal = g
                    .iter()
                    .any(|y| &y.category == c && azimuth_bin(&y.rotation, k, 0.0).is_none());
                if !gimbal {
                    assert!((*x - ap.get(c).unwrap()).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn azimuth_on_a_bin_edge_starts_the_next_bin() {
    for k in [4usize, 8, 16, 24] {
        for i in 0..k {
            let edge = i as f64 * 360.0 / k as f64;
            assert_eq!(bin_of_degrees(edge, k, 0.0), i);
            assert_eq!(oracle_bin(edge, k), i);
        }
    }
    let r = EulerZXZ::from_degrees(10.0, 40.0, 0.0).unwrap().to_rotation();
    let p = EulerZXZ::from_degrees(12.0, 40.0, 0.0).unwrap().to_rotation();
    assert_eq!(azimuth_bin(&r, 8, 0.0), azimuth_bin(&p, 8, 0.0));
    let r = EulerZXZ::from_degrees(44.0, 40.0, 0.0).unwrap().to_rotation();
    let p = EulerZXZ::from_degrees(46.0, 40.0, 0.0).unwrap().to_rotation();
    assert_ne!(azimuth_bin(&r, 8, 0.0), azimuth_bin(&p, 8, 0.0));
    // the offset shifts the phase
    assert_eq!(bin_of_degrees(10.0, 8, 15.0), 7);
}

#[test]
fn gimbal_locked_prediction_is_not_pose_correct() {
    let b = [0.0, 0.0, 10.0, 10.0];
    let locked = EulerZXZ::new(0.3, 0.0, 0.0).unwrap().to_rotation();
    let g = vec![GroundTruth { category: "car".into(), bbox: b, rotation: locked }];
    let d = vec![Detection { category: "car".into(), bbox: b, score: 1.0, rotation: locked }];
    assert_eq!(avp(&d, &g, 8, 0.0).unwrap().mean, 0.0);
    assert_eq!(detection_ap(&d, &g).mean, 1.0);
}

#[test]
fn half_matched_example() {
    let mk = |x: f64| [x, 0.0, x + 10.0, 10.0];
    let g: Vec<GroundTruth> = (0..4)
        .map(|i| GroundTruth { category: "car".into(), bbox: mk(100.0 * i as f64), rotation: Rotation::identity() })
        .collect();
    let d: Vec<Detection> = (0..2)
        .map(|i| Detection { category: "car".into(), bbox: mk(100.0 * i as f64), score: 0.5, rotation: Rotation::identity() })
        .collect();
    let (_, pooled) = detection_analysis(&d, &g);
    assert_eq!((pooled.detected, pooled.correct), (0.5, 0.5));
    assert_eq!(pooled.pose_err, Some(0.0));
}

#[test]
fn record_files_roundtrip() {
    let mut r = ChaCha8Rng::seed_from_u64(16);
    let (d, g) = random_detection_set(&mut r);
    let mut text = String::from("# header\n");
    for x in &g {
        text.push_str(&format_gt(x));
        text.push('\n');
    }
    for x in &d {
        text.push_str(&format_det(x));
        text.push('\n');
    }
    let (d2, g2) = read_records(text.as_bytes()).unwrap();
    assert_eq!(d2.len(), d.len());
    assert_eq!(g2.len(), g.len());
    for (a, b) in d.iter().zip(&d2) {
        assert_eq!(a.bbox, b.bbox);
        assert_eq!(a.score, b.score);
        assert!((a.rotation.matrix() - b.rotation.matrix()).norm() < 1e-12);
    }
    let bad = "car det 1 2 3\n";
    assert!(matches!(read_records(bad.as_bytes()), Err(orient_geo::Error::Parse { line: 1, .. })));
}
