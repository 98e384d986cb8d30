//! Evaluation metrics: MedErr, Acc_pi/6, ARP, AVP and detection analysis.
//!
//! Angles are reported in degrees. Per-category values are averaged with equal
//! weight into the `mean` column. Detections are matched greedily by
//! descending score (input order breaks ties) to the unmatched ground truth
//! of highest IoU, provided the IoU exceeds 0.5; a ground truth is consumed by
//! the match whether or not the pose is correct. Average precision is the area
//! under the monotone precision envelope.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::str::FromStr;

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{geodesic_distance, rotation_to_euler, Rotation, UnitQuaternion};

/// Category order of the result tables.
pub const CATEGORIES: [&str; 12] = [
    "aero", "bike", "boat", "bottle", "bus", "car", "chair", "dtable", "mbike", "sofa", "train", "tv",
];

/// Pose threshold of Acc_pi/6 and ARP, in degrees (strict).
pub const ACC_THRESHOLD_DEG: f64 = 30.0;

/// IoU a detection must exceed to match a ground truth.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Axis-aligned box `[x1, y1, x2, y2]` in pixels.
pub type BoundingBox = [f64; 4];

fn check_box(b: &BoundingBox) -> Result<()> {
    if !(b.iter().all(|x| x.is_finite()) && b[0] < b[2] && b[1] < b[3]) {
        return Err(Error::Config(format!("box {b:?} is not well ordered")));
    }
    Ok(())
}

/// Intersection over union of two boxes (continuous coordinates).
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &BoundingBox| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Geodesic angle in degrees.
pub fn angle_error_deg(a: &Rotation, b: &Rotation) -> f64 {
    geodesic_distance(a, b).to_degrees()
}

/// A pose prediction paired with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub category: String,
    pub r_true: Rotation,
    pub r_pred: Rotation,
    pub det: Option<(BoundingBox, f64)>,
    pub gt_box: Option<BoundingBox>,
}

impl EvalRecord {
    pub fn new(category: impl Into<String>, r_true: Rotation, r_pred: Rotation) -> Self {
        Self {
            category: category.into(),
            r_true,
            r_pred,
            det: None,
            gt_box: None,
        }
    }

    pub fn error_deg(&self) -> f64 {
        angle_error_deg(&self.r_true, &self.r_pred)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub category: String,
    pub bbox: BoundingBox,
    pub score: f64,
    pub rotation: Rotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub category: String,
    pub bbox: BoundingBox,
    pub rotation: Rotation,
}

/// Per-category values and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryValues {
    pub per_category: BTreeMap<String, f64>,
    pub mean: f64,
}

impl CategoryValues {
    fn from_map(per_category: BTreeMap<String, f64>) -> Self {
        let mean = if per_category.is_empty() {
            0.0
        } else {
            per_category.values().sum::<f64>() / per_category.len() as f64
        };
        Self { per_category, mean }
    }

    pub fn get(&self, category: &str) -> Option<f64> {
        self.per_category.get(category).copied()
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn errors_by_category(records: &[EvalRecord]) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        out.entry(r.category.clone()).or_default().push(r.error_deg());
    }
    out
}

fn require(records: &[EvalRecord], categories: &[String]) -> Result<BTreeMap<String, Vec<f64>>> {
    let by = errors_by_category(records);
    for c in categories {
        if !by.contains_key(c) {
            return Err(Error::EmptyCategory(c.clone()));
        }
    }
    Ok(by)
}

/// Median angle error per category (degrees).
///
/// Every category in `categories` must have a record; categories present in
/// the records but not listed are reported too.
pub fn med_err(records: &[EvalRecord], categories: &[String]) -> Result<CategoryValues> {
    let by = require(records, categories)?;
    Ok(CategoryValues::from_map(
        by.into_iter()
            .map(|(c, e)| {
                let m = median(&e).expect("nonempty");
                (c, m)
            })
            .collect(),
    ))
}

/// Fraction of errors strictly below `threshold_deg` per category.
pub fn accuracy(records: &[EvalRecord], categories: &[String], threshold_deg: f64) -> Result<CategoryValues> {
    let by = require(records, categories)?;
    Ok(CategoryValues::from_map(
        by.into_iter()
            .map(|(c, e)| {
                let hits = e.iter().filter(|x| **x < threshold_deg).count();
                (c, hits as f64 / e.len() as f64)
            })
            .collect(),
    ))
}

/// Fraction of errors strictly below 30 degrees per category.
pub fn acc_pi6(records: &[EvalRecord], categories: &[String]) -> Result<CategoryValues> {
    accuracy(records, categories, ACC_THRESHOLD_DEG)
}

/// Greedy matching of one category. Returns, for each detection in input
/// order, the index of the matched ground truth.
pub fn match_detections(dets: &[&Detection], gts: &[&GroundTruth]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = iou(&dets[i].bbox, &g.bbox);
            if o > IOU_THRESHOLD && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// Area under the monotone precision envelope, given true-positive flags in
/// descending score order.
pub fn average_precision(tp_in_rank_order: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp_in_rank_order.len());
    let mut precision = Vec::with_capacity(tp_in_rank_order.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_in_rank_order.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

fn group<T>(items: &[T], cat: impl Fn(&T) -> &str) -> BTreeMap<String, Vec<&T>> {
    let mut out: BTreeMap<String, Vec<&T>> = BTreeMap::new();
    for it in items {
        out.entry(cat(it).to_string()).or_default().push(it);
    }
    out
}

/// Detection AP per ground-truth category where a matched detection counts
/// only if `correct(det, gt)`.
pub fn ap_with<F>(dets: &[Detection], gts: &[GroundTruth], correct: F) -> CategoryValues
where
    F: Fn(&Detection, &GroundTruth) -> bool,
{
    let d_by = group(dets, |d| &d.category);
    let g_by = group(gts, |g| &g.category);
    let mut per = BTreeMap::new();
    for (cat, g) in &g_by {
        let d: Vec<&Detection> = d_by.get(cat).cloned().unwrap_or_default();
        let m = match_detections(&d, g);
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[b].score.total_cmp(&d[a].score));
        let flags: Vec<bool> = order
            .iter()
            .map(|&i| m[i].is_some_and(|j| correct(d[i], g[j])))
            .collect();
        per.insert(cat.clone(), average_precision(&flags, g.len()));
    }
    CategoryValues::from_map(per)
}

/// Plain detection AP.
pub fn detection_ap(dets: &[Detection], gts: &[GroundTruth]) -> CategoryValues {
    ap_with(dets, gts, |_, _| true)
}

/// AP where a true positive also needs a pose error below `theta_deg`.
pub fn arp(dets: &[Detection], gts: &[GroundTruth], theta_deg: f64) -> CategoryValues {
    ap_with(dets, gts, |d, g| angle_error_deg(&d.rotation, &g.rotation) < theta_deg)
}

/// Azimuth bin of a rotation, or `None` at gimbal lock.
///
/// Bins are half-open, `[offset + i * 360 / K, offset + (i + 1) * 360 / K)`.
pub fn azimuth_bin(r: &Rotation, bins: usize, offset_deg: f64) -> Option<usize> {
    let e = rotation_to_euler(r).ok()?;
    Some(bin_of_degrees(e.az.to_degrees(), bins, offset_deg))
}

/// Bin of an azimuth given in degrees.
pub fn bin_of_degrees(az_deg: f64, bins: usize, offset_deg: f64) -> usize {
    let a = (az_deg - offset_deg).rem_euclid(360.0);
    let width = 360.0 / bins as f64;
    ((a / width).floor() as usize).min(bins - 1)
}

/// AP where a true positive also needs matching azimuth bins; a gimbal-locked
/// rotation is never correct.
pub fn avp(dets: &[Detection], gts: &[GroundTruth], bins: usize, offset_deg: f64) -> Result<CategoryValues> {
    if bins == 0 {
        return Err(Error::Config("AVP needs at least one bin".into()));
    }
    Ok(ap_with(dets, gts, |d, g| {
        match (azimuth_bin(&d.rotation, bins, offset_deg), azimuth_bin(&g.rotation, bins, offset_deg)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }))
}

/// Fraction of ground truths detected, fraction detected with a pose error
/// below 30 degrees, and median pose error over matched pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionAnalysis {
    pub detected: f64,
    pub correct: f64,
    pub pose_err: Option<f64>,
    pub num_gt: usize,
}

/// Detection analysis per category and pooled over all categories.
pub fn detection_analysis(
    dets: &[Detection],
    gts: &[GroundTruth],
) -> (BTreeMap<String, DetectionAnalysis>, DetectionAnalysis) {
    let pairs = matched_pairs(dets, gts);
    let g_by = group(gts, |g| &g.category);
    let mut all_errors = Vec::new();
    let mut per = BTreeMap::new();
    let (mut det_total, mut ok_total) = (0usize, 0usize);
    for (cat, g) in &g_by {
        let errors: Vec<f64> = pairs
            .iter()
            .filter(|r| &r.category == cat)
            .map(EvalRecord::error_deg)
            .collect();
        let ok = errors.iter().filter(|e| **e < ACC_THRESHOLD_DEG).count();
        det_total += errors.len();
        ok_total += ok;
        per.insert(
            cat.clone(),
            DetectionAnalysis {
                detected: errors.len() as f64 / g.len() as f64,
                correct: ok as f64 / g.len() as f64,
                pose_err: median(&errors),
                num_gt: g.len(),
            },
        );
        all_errors.extend(errors);
    }
    let n = gts.len();
    let pooled = DetectionAnalysis {
        detected: if n > 0 { det_total as f64 / n as f64 } else { 0.0 },
        correct: if n > 0 { ok_total as f64 / n as f64 } else { 0.0 },
        pose_err: median(&all_errors),
        num_gt: n,
    };
    (per, pooled)
}

/// Matched detection/ground-truth pairs as pose records, ordered by category
/// and descending score.
pub fn matched_pairs(dets: &[Detection], gts: &[GroundTruth]) -> Vec<EvalRecord> {
    let d_by = group(dets, |d| &d.category);
    let g_by = group(gts, |g| &g.category);
    let mut out = Vec::new();
    for (cat, g) in &g_by {
        let d: Vec<&Detection> = d_by.get(cat).cloned().unwrap_or_default();
        let m = match_detections(&d, g);
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[b].score.total_cmp(&d[a].score));
        for i in order {
            if let Some(j) = m[i] {
                out.push(EvalRecord {
                    category: cat.clone(),
                    r_true: g[j].rotation,
                    r_pred: d[i].rotation,
                    det: Some((d[i].bbox, d[i].score)),
                    gt_box: Some(g[j].bbox),
                });
            }
        }
    }
    out
}

/// One parsed line of a record file.
#[derive(Clone, Debug, PartialEq)]
pub enum RecordLine {
    Gt(GroundTruth),
    Det(Detection),
}

impl FromStr for RecordLine {
    type Err = String;

    /// `category tag(gt|det) x1 y1 x2 y2 score q0 q1 q2 q3`; the score of a
    /// ground truth is ignored and may be `-`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 11 {
            return Err(format!("expected 11 fields, got {}", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {}: {e}", i + 1));
        let bbox = [num(2)?, num(3)?, num(4)?, num(5)?];
        check_box(&bbox).map_err(|e| e.to_string())?;
        let q = Vector4::new(num(7)?, num(8)?, num(9)?, num(10)?);
        let rotation = UnitQuaternion::from_vector(q)
            .map_err(|e| e.to_string())?
            .to_rotation();
        let category = f[0].to_string();
        match f[1] {
            "gt" => Ok(RecordLine::Gt(GroundTruth {
                category,
                bbox,
                rotation,
            })),
            "det" => {
                let score = num(6)?;
                if !score.is_finite() {
                    return Err("non-finite score".into());
                }
                Ok(RecordLine::Det(Detection {
                    category,
                    bbox,
                    score,
                    rotation,
                }))
            }
            t => Err(format!("unknown tag '{t}'")),
        }
    }
}

/// Reads a record file into detections and ground truths. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_records<R: BufRead>(r: R) -> Result<(Vec<Detection>, Vec<GroundTruth>)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        match t.parse::<RecordLine>().map_err(|msg| Error::Parse { line: i + 1, msg })? {
            RecordLine::Gt(g) => gts.push(g),
            RecordLine::Det(d) => dets.push(d),
        }
    }
    Ok((dets, gts))
}

fn quat_fields(r: &Rotation) -> String {
    let q = r.to_quaternion();
    let v = q.vector();
    format!("{} {} {} {}", v[0], v[1], v[2], v[3])
}

/// Formats a ground-truth record line.
pub fn format_gt(g: &GroundTruth) -> String {
    let b = g.bbox;
    format!("{} gt {} {} {} {} - {}", g.category, b[0], b[1], b[2], b[3], quat_fields(&g.rotation))
}

/// Formats a detection record line.
pub fn format_det(d: &Detection) -> String {
    let b = d.bbox;
    format!(
        "{} det {} {} {} {} {} {}",
        d.category,
        b[0],
        b[1],
        b[2],
        b[3],
        d.score,
        quat_fields(&d.rotation)
    )
}

/// Table ordering: the known categories in table order, then any others sorted.
pub fn ordered_categories<'a, I: IntoIterator<Item = &'a String>>(present: I) -> Vec<String> {
    let mut rest: Vec<String> = present.into_iter().cloned().collect();
    rest.sort();
    rest.dedup();
    let mut out: Vec<String> = CATEGORIES
        .iter()
        .filter(|c| rest.iter().any(|r| r == *c))
        .map(|c| c.to_string())
        .collect();
    out.extend(rest.into_iter().filter(|r| !CATEGORIES.contains(&r.as_str())));
    out
}

/// One table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
}

/// Metric table: one row per metric, one column per category plus the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub categories: Vec<String>,
    pub counts: Vec<usize>,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(categories: Vec<String>, counts: Vec<usize>) -> Self {
        Self {
            categories,
            counts,
            rows: Vec::new(),
        }
    }

    /// Appends a row; categories missing from `values` are reported as NaN and
    /// excluded from the mean.
    pub fn push(&mut self, metric: &str, values: &CategoryValues) {
        let vals: Vec<f64> = self
            .categories
            .iter()
            .map(|c| values.get(c).unwrap_or(f64::NAN))
            .collect();
        let finite: Vec<f64> = vals.iter().copied().filter(|v| !v.is_nan()).collect();
        let mean = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            values: vals,
            mean,
        });
    }

    pub fn row(&self, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    /// CSV with a `metric` column, one column per category and `mean`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for c in &self.categories {
            s.push(',');
            s.push_str(c);
        }
        s.push_str(",mean\n");
        s.push_str("count");
        for n in &self.counts {
            s.push_str(&format!(",{n}"));
        }
        s.push_str(&format!(",{}\n", self.counts.iter().sum::<usize>()));
        for r in &self.rows {
            s.push_str(&r.metric);
            for v in r.values.iter().chain(std::iter::once(&r.mean)) {
                s.push_str(&format!(",{}", format_cell(*v)));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.json_value())?)
    }

    fn json_value(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut m = serde_json::Map::new();
                m.insert("metric".into(), r.metric.clone().into());
                for (c, v) in self.categories.iter().zip(&r.values) {
                    m.insert(c.clone(), json_number(*v));
                }
                m.insert("mean".into(), json_number(r.mean));
                serde_json::Value::Object(m)
            })
            .collect();
        serde_json::json!({
            "categories": self.categories,
            "counts": self.counts,
            "rows": rows,
        })
    }
}

fn json_number(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or(serde_json::Value::Null, serde_json::Value::Number)
}

fn format_cell(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}
