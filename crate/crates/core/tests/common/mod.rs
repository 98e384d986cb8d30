//! Brute-force oracles and random fixtures shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use orient_geo::eval::*;
use orient_geo::so3::{EulerZXZ, Rotation};
use rand::Rng;

/// Principal matrix logarithm by inverse scaling and squaring: Denman-Beavers
/// square roots until the matrix is near the identity, then the Mercator
/// series. Uses no rotation-specific formula.
pub fn oracle_matrix_log(a: &Matrix3<f64>) -> Matrix3<f64> {
    let mut y = *a;
    let mut k = 0;
    while (y - Matrix3::identity()).norm() > 1e-3 {
        let mut z = Matrix3::identity();
        for _ in 0..100 {
            let yi = y.try_inverse().expect("invertible");
            let zi = z.try_inverse().expect("invertible");
            let y1 = 0.5 * (y + zi);
            z = 0.5 * (z + yi);
            let done = (y1 - y).norm() < 1e-15;
            y = y1;
            if done {
                break;
            }
        }
        k += 1;
    }
    let x = y - Matrix3::identity();
    let mut term = x;
    let mut log = Matrix3::zeros();
    for n in 1..30 {
        let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
        log += term * (sign / n as f64);
        term *= x;
    }
    log * 2f64.powi(k)
}

/// `||log(R1^T R2)||_F / sqrt(2)` with the oracle logarithm.
pub fn oracle_log_distance(r1: &Rotation, r2: &Rotation) -> f64 {
    oracle_matrix_log(&(r1.matrix().transpose() * r2.matrix())).norm() / 2f64.sqrt()
}

/// Rotation by `theta` about a random unit axis.
pub fn random_axis_angle<R: Rng>(theta: f64, r: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v * (theta / n);
        }
    }
}

/// Straight Rodrigues evaluation, written out entry by entry.
pub fn oracle_exp(v: &Vector3<f64>) -> Matrix3<f64> {
    let t = v.norm();
    if t == 0.0 {
        return Matrix3::identity();
    }
    let (x, y, z) = (v.x / t, v.y / t, v.z / t);
    let (s, c) = t.sin_cos();
    let d = 1.0 - c;
    Matrix3::new(
        c + x * x * d,
        x * y * d - z * s,
        x * z * d + y * s,
        y * x * d + z * s,
        c + y * y * d,
        y * z * d - x * s,
        z * x * d - y * s,
        z * y * d + x * s,
        c + z * z * d,
    )
}

pub fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| {
        let lo = if lo1 > lo2 { lo1 } else { lo2 };
        let hi = if hi1 < hi2 { hi1 } else { hi2 };
        if hi > lo {
            hi - lo
        } else {
            0.0
        }
    };
    let i = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
    let u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - i;
    i / u
}

pub fn oracle_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    // insertion sort
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = v.len();
    if n % 2 == 1 {
        v[(n - 1) / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Detections of one category sorted by descending score, ties in input order.
pub fn oracle_rank(dets: &[&Detection]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..dets.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if dets[left[k]].score > dets[left[best]].score {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// `(rank order, matched gt per ranked detection)` for one category.
pub fn oracle_match(dets: &[&Detection], gts: &[&GroundTruth]) -> (Vec<usize>, Vec<Option<usize>>) {
    let rank = oracle_rank(dets);
    let mut used = vec![false; gts.len()];
    let mut matched = Vec::new();
    for &i in &rank {
        let mut pick: Option<usize> = None;
        for j in 0..gts.len() {
            let o = oracle_iou(&dets[i].bbox, &gts[j].bbox);
            if used[j] || !(o > 0.5) {
                continue;
            }
            match pick {
                Some(p) if oracle_iou(&dets[i].bbox, &gts[p].bbox) >= o => {}
                _ => pick = Some(j),
            }
        }
        if let Some(j) = pick {
            used[j] = true;
        }
        matched.push(pick);
    }
    (rank, matched)
}

/// AP as the sum over true-positive ranks of the best precision at that
/// recall or beyond, divided by the number of ground truths.
pub fn oracle_ap(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let prec: Vec<f64> = (0..flags.len())
        .map(|k| flags[..=k].iter().filter(|f| **f).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            let best = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / num_gt as f64;
        }
    }
    ap
}

pub fn categories_of(gts: &[GroundTruth]) -> Vec<String> {
    let mut c: Vec<String> = gts.iter().map(|g| g.category.clone()).collect();
    c.sort();
    c.dedup();
    c
}

pub fn oracle_ap_with<F>(dets: &[Detection], gts: &[GroundTruth], correct: F) -> Vec<(String, f64)>
where
    F: Fn(&Detection, &GroundTruth) -> bool,
{
    categories_of(gts)
        .into_iter()
        .map(|c| {
            let d: Vec<&Detection> = dets.iter().filter(|x| x.category == c).collect();
            let g: Vec<&GroundTruth> = gts.iter().filter(|x| x.category == c).collect();
            let (rank, m) = oracle_match(&d, &g);
            let flags: Vec<bool> = rank
                .iter()
                .zip(&m)
                .map(|(&i, mj)| match mj {
                    Some(j) => correct(d[i], g[*j]),
                    None => false,
                })
                .collect();
            let ap = oracle_ap(&flags, g.len());
            (c, ap)
        })
        .collect()
}

/// Azimuth in degrees read straight off the matrix, or None at gimbal lock.
pub fn oracle_azimuth(r: &Rotation) -> Option<f64> {
    let m = r.matrix();
    if (m[(2, 0)] * m[(2, 0)] + m[(2, 1)] * m[(2, 1)]).sqrt() < 1e-8 {
        return None;
    }
    Some(m[(2, 0)].atan2(m[(2, 1)]).to_degrees())
}

pub fn oracle_bin(az: f64, k: usize) -> usize {
    let mut a = az;
    while a < 0.0 {
        a += 360.0;
    }
    while a >= 360.0 {
        a -= 360.0;
    }
    for i in 0..k {
        let lo = i as f64 * 360.0 / k as f64;
        let hi = (i + 1) as f64 * 360.0 / k as f64;
        if a >= lo && a < hi {
            return i;
        }
    }
    k - 1
}

const CATS: [&str; 3] = ["car", "bus", "tv"];

fn random_box<R: Rng>(r: &mut R) -> [f64; 4] {
    let x = r.random_range(0.0..500.0);
    let y = r.random_range(0.0..350.0);
    let w = r.random_range(20.0..140.0);
    let h = r.random_range(20.0..130.0);
    [x, y, x + w, y + h]
}

fn perturb_box<R: Rng>(b: &[f64; 4], r: &mut R) -> [f64; 4] {
    let w = b[2] - b[0];
    let h = b[3] - b[1];
    let s = r.random_range(0.0..0.35);
    let dx = s * w * r.random_range(-1.0..1.0);
    let dy = s * h * r.random_range(-1.0..1.0);
    [b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy]
}

/// Pose with az on a 45-degree grid half the time (bin edges for K in {4, 8}).
fn random_pose<R: Rng>(r: &mut R) -> Rotation {
    let az = if r.random_bool(0.5) {
        45.0 * r.random_range(-4..4) as f64
    } else {
        r.random_range(-180.0..180.0)
    };
    let el = if r.random_bool(0.05) { 0.0 } else { r.random_range(5.0..175.0) };
    EulerZXZ::from_degrees(az, el, r.random_range(-40.0..40.0))
        .unwrap()
        .to_rotation()
}

/// Random prediction near `truth`: sometimes exact, sometimes exactly 30
/// degrees away about z, otherwise a random error up to 60 degrees.
fn predict<R: Rng>(truth: &Rotation, r: &mut R) -> Rotation {
    match r.random_range(0..4) {
        0 => *truth,
        1 => Rotation::about_z(30f64.to_radians()) * *truth,
        _ => {
            let axis = Rotation::random(r);
            let a = r.random_range(0.0..60f64.to_radians());
            let v = axis.matrix().column(0) * a;
            orient_geo::so3::exp_map(&orient_geo::so3::AxisAngle::from_unconstrained(v))
                * *truth
        }
    }
}

/// A random detection set: ground truths in three categories, detections
/// that hit, near-miss or duplicate them, plus clutter. Scores are quantized
/// so ties occur.
pub fn random_detection_set<R: Rng>(r: &mut R) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for _ in 0..r.random_range(3..15) {
        let cat = CATS[r.random_range(0..CATS.len())].to_string();
        let g = GroundTruth {
            category: cat.clone(),
            bbox: random_box(r),
            rotation: random_pose(r),
        };
        for _ in 0..r.random_range(0..3) {
            dets.push(Detection {
                category: cat.clone(),
                bbox: perturb_box(&g.bbox, r),
                score: (r.random_range(0.0..1.0f64) * 10.0).round() / 10.0,
                rotation: predict(&g.rotation, r),
            });
        }
        gts.push(g);
    }
    for _ in 0..r.random_range(0..6) {
        dets.push(Detection {
            category: CATS[r.random_range(0..CATS.len())].to_string(),
            bbox: random_box(r),
            score: (r.random_range(0.0..1.0f64) * 10.0).round() / 10.0,
            rotation: Rotation::random(r),
        });
    }
    (dets, gts)
}

/// Largest deviation of AP, ARP, AVP (4, 8, 16, 24 bins), detection analysis,
/// MedErr and Acc from the brute-force oracles; infinite on a structural
/// mismatch (missing value, wrong presence of a pose error).
pub fn metric_oracle_deviation(dets: &[Detection], gts: &[GroundTruth]) -> f64 {
    let mut dev = 0.0f64;
    let mut close = |a: f64, b: f64| {
        dev = dev.max((a - b).abs());
    };
    for (c, want) in oracle_ap_with(dets, gts, |_, _| true) {
        close(detection_ap(dets, gts).get(&c).unwrap_or(f64::INFINITY), want);
    }
    let arp_v = arp(dets, gts, 30.0);
    for (c, want) in oracle_ap_with(dets, gts, |d, g| angle_error_deg(&d.rotation, &g.rotation) < 30.0) {
        close(arp_v.get(&c).unwrap_or(f64::INFINITY), want);
    }
    for k in [4, 8, 16, 24] {
        let got = avp(dets, gts, k, 0.0).unwrap();
        let oracle = oracle_ap_with(dets, gts, |d, g| match (oracle_azimuth(&d.rotation), oracle_azimuth(&g.rotation)) {
            (Some(a), Some(b)) => oracle_bin(a, k) == oracle_bin(b, k),
            _ => false,
        });
        for (c, want) in oracle {
            close(got.get(&c).unwrap_or(f64::INFINITY), want);
        }
    }
    let (per, pooled) = detection_analysis(dets, gts);
    let mut all_err = Vec::new();
    let (mut n_det, mut n_ok) = (0, 0);
    for c in categories_of(gts) {
        let d: Vec<&Detection> = dets.iter().filter(|x| x.category == c).collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|x| x.category == c).collect();
        let (rank, m) = oracle_match(&d, &g);
        let errs: Vec<f64> = rank
            .iter()
            .zip(&m)
            .filter_map(|(&i, mj)| mj.map(|j| angle_error_deg(&d[i].rotation, &g[j].rotation)))
            .collect();
        let ok = errs.iter().filter(|e| **e < 30.0).count();
        let a = &per[&c];
        close(a.detected, errs.len() as f64 / g.len() as f64);
        close(a.correct, ok as f64 / g.len() as f64);
        match a.pose_err {
            Some(p) => close(p, oracle_median(&errs)),
            None => close(if errs.is_empty() { 0.0 } else { f64::INFINITY }, 0.0),
        }
        n_det += errs.len();
        n_ok += ok;
        all_err.extend(errs);
    }
    close(pooled.detected, n_det as f64 / gts.len() as f64);
    close(pooled.correct, n_ok as f64 / gts.len() as f64);
    if !all_err.is_empty() {
        close(pooled.pose_err.unwrap_or(f64::INFINITY), oracle_median(&all_err));
    }
    let pairs = matched_pairs(dets, gts);
    let cats: Vec<String> = categories_of(gts)
        .into_iter()
        .filter(|c| pairs.iter().any(|p| &p.category == c))
        .collect();
    let me = med_err(&pairs, &cats).unwrap();
    let acc = acc_pi6(&pairs, &cats).unwrap();
    for c in &cats {
        let e: Vec<f64> = pairs.iter().filter(|p| &p.category == c).map(|p| p.error_deg()).collect();
        close(me.get(c).unwrap_or(f64::INFINITY), oracle_median(&e));
        let hits = e.iter().filter(|x| **x < 30.0).count() as f64 / e.len() as f64;
        close(acc.get(c).unwrap_or(f64::INFINITY), hits);
    }
    dev
}
