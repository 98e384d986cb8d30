//! End-to-end experiments: generate, fit dictionaries, train, evaluate, write
//! artifacts.
//!
//! Reports are computed from the prediction dump alone. Rotations are stored
//! as quaternions whose decimal form roundtrips exactly, so re-reading
//! `predictions.txt` reproduces every report cell bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use nalgebra::Vector4;

use crate::dictionary::PoseDictionary;
use crate::error::{Error, Result};
use crate::eval::{acc_pi6, med_err, median, CategoryValues, EvalRecord, MetricReport};
use crate::harness::config::ExperimentConfig;
use crate::harness::data::{generate_synthetic, Split};
use crate::harness::model::{write_checkpoint, CategoryModel};
use crate::harness::train::{fit_dictionaries, train_with_seed, TrainingLog};
use crate::so3::{geodesic_distance, Rotation, UnitQuaternion};

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub trial: usize,
    pub category: String,
    pub index: usize,
    pub truth: [f64; 4],
    pub prediction: [f64; 4],
    /// Nearest key pose of the truth, when the model has a dictionary.
    pub nearest_key: Option<[f64; 4]>,
}

fn quat(r: &Rotation) -> [f64; 4] {
    let v = r.to_quaternion();
    let v = v.vector();
    [v[0], v[1], v[2], v[3]]
}

fn rotation(q: &[f64; 4]) -> Result<Rotation> {
    Ok(UnitQuaternion::from_vector(Vector4::from_column_slice(q))?.to_rotation())
}

impl PredictionRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {} {}", self.trial, self.category, self.index);
        for v in self.truth.iter().chain(&self.prediction) {
            write!(s, " {v}").expect("write to string");
        }
        match &self.nearest_key {
            Some(k) => k.iter().for_each(|v| write!(s, " {v}").expect("write to string")),
            None => s.push_str(" -"),
        }
        s
    }

    pub fn from_line(line: &str, lineno: usize) -> Result<Self> {
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 12 && f.len() != 15 {
            return Err(bad(format!("expected 12 or 15 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("'{s}': {e}")));
        let q = |i: usize| -> Result<[f64; 4]> { Ok([num(f[i])?, num(f[i + 1])?, num(f[i + 2])?, num(f[i + 3])?]) };
        Ok(Self {
            trial: f[0].parse().map_err(|e| bad(format!("trial: {e}")))?,
            category: f[1].to_string(),
            index: f[2].parse().map_err(|e| bad(format!("index: {e}")))?,
            truth: q(3)?,
            prediction: q(7)?,
            nearest_key: if f.len() == 15 { Some(q(11)?) } else { None },
        })
    }

    pub fn eval_record(&self) -> Result<EvalRecord> {
        Ok(EvalRecord::new(self.category.clone(), rotation(&self.truth)?, rotation(&self.prediction)?))
    }
}

const PREDICTIONS_HEADER: &str =
    "# trial category index truth(w x y z) prediction(w x y z) nearest_key(w x y z | -)";

pub fn write_predictions(records: &[PredictionRecord]) -> String {
    let mut s = String::from(PREDICTIONS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(PredictionRecord::from_line(t, i + 1)?);
    }
    Ok(out)
}

/// Nearest key pose by exhaustive geodesic scan.
pub fn nearest_key<'a>(dict: &'a PoseDictionary, r: &Rotation) -> &'a Rotation {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..dict.len() {
        let d = geodesic_distance(dict.key_rotation(k), r);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    dict.key_rotation(best)
}

/// Median geodesic distance (degrees) from the rotations to their nearest
/// key: the best MedErr any pure classifier over `dict` can reach.
pub fn discretization_floor(dict: &PoseDictionary, rotations: &[Rotation]) -> f64 {
    let d: Vec<f64> = rotations
        .iter()
        .map(|r| geodesic_distance(nearest_key(dict, r), r).to_degrees())
        .collect();
    median(&d).unwrap_or(f64::NAN)
}

pub fn predict_split(trial: usize, models: &[CategoryModel], splits: &[&Split]) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (m, split) in models.iter().zip(splits) {
        for (index, (f, r)) in split.features.iter().zip(&split.rotations).enumerate() {
            out.push(PredictionRecord {
                trial,
                category: m.category.clone(),
                index,
                truth: quat(r),
                prediction: quat(&m.predict(f)?),
                nearest_key: m.dictionary.as_ref().map(|d| quat(nearest_key(d, r))),
            });
        }
    }
    Ok(out)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn values(map: BTreeMap<String, f64>) -> CategoryValues {
    let mean = map.values().sum::<f64>() / map.len().max(1) as f64;
    CategoryValues { per_category: map, mean }
}

/// Report rows `MedErr`, `MedErr_std`, `Acc_pi/6`, `Acc_pi/6_std` (mean and
/// sample std over trials per category) and `Floor` when nearest keys are
/// present. Columns follow `categories`.
pub fn report_from_predictions(records: &[PredictionRecord], categories: &[String]) -> Result<MetricReport> {
    let mut trials: Vec<usize> = records.iter().map(|r| r.trial).collect();
    trials.sort_unstable();
    trials.dedup();
    let first = *trials.first().ok_or_else(|| Error::Config("no predictions".into()))?;
    let mut med: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &t in &trials {
        let evals = records
            .iter()
            .filter(|r| r.trial == t)
            .map(|r| r.eval_record())
            .collect::<Result<Vec<_>>>()?;
        let m = med_err(&evals, categories)?;
        let a = acc_pi6(&evals, categories)?;
        for c in categories {
            med.entry(c.clone()).or_default().extend(m.get(c));
            acc.entry(c.clone()).or_default().extend(a.get(c));
        }
    }
    let counts = categories
        .iter()
        .map(|c| records.iter().filter(|r| r.trial == first && &r.category == c).count())
        .collect();
    let mut report = MetricReport::new(categories.to_vec(), counts);
    for (name, per) in [("MedErr", &med), ("Acc_pi/6", &acc)] {
        let stats: BTreeMap<String, (f64, f64)> = per.iter().map(|(c, v)| (c.clone(), mean_std(v))).collect();
        report.push(name, &values(stats.iter().map(|(c, s)| (c.clone(), s.0)).collect()));
        report.push(&format!("{name}_std"), &values(stats.iter().map(|(c, s)| (c.clone(), s.1)).collect()));
    }
    if records.iter().all(|r| r.nearest_key.is_some()) {
        let mut floor = BTreeMap::new();
        for c in categories {
            let d = records
                .iter()
                .filter(|r| r.trial == first && &r.category == c)
                .map(|r| {
                    let key = rotation(r.nearest_key.as_ref().expect("checked above"))?;
                    Ok(geodesic_distance(&key, &rotation(&r.truth)?).to_degrees())
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(m) = median(&d) {
                floor.insert(c.clone(), m);
            }
        }
        report.push("Floor", &values(floor));
    }
    Ok(report)
}

/// Everything an experiment produces.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub report: MetricReport,
    pub val_report: MetricReport,
    pub test_predictions: Vec<PredictionRecord>,
    pub val_predictions: Vec<PredictionRecord>,
    /// One log and one set of trained models per trial.
    pub logs: Vec<TrainingLog>,
    pub models: Vec<Vec<CategoryModel>>,
}

/// Runs every trial in memory. Data and dictionaries come from `cfg.seed`
/// and the dictionary seed; trial `t` trains from seed `cfg.seed + t`.
pub fn evaluate_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = generate_synthetic(cfg, cfg.seed)?;
    let dicts = fit_dictionaries(cfg, &data)?;
    let categories = cfg.category_names();
    let test: Vec<&Split> = data.categories.iter().map(|c| &c.test).collect();
    let val: Vec<&Split> = data.categories.iter().map(|c| &c.val).collect();
    let mut result = ExperimentResult {
        config: cfg.clone(),
        report: MetricReport::new(Vec::new(), Vec::new()),
        val_report: MetricReport::new(Vec::new(), Vec::new()),
        test_predictions: Vec::new(),
        val_predictions: Vec::new(),
        logs: Vec::new(),
        models: Vec::new(),
    };
    for t in 0..cfg.trials {
        let trained = train_with_seed(cfg, &data, &dicts, cfg.seed.wrapping_add(t as u64))?;
        result.test_predictions.extend(predict_split(t, &trained.models, &test)?);
        result.val_predictions.extend(predict_split(t, &trained.models, &val)?);
        result.logs.push(trained.log);
        result.models.push(trained.models);
    }
    result.report = report_from_predictions(&result.test_predictions, &categories)?;
    result.val_report = report_from_predictions(&result.val_predictions, &categories)?;
    Ok(result)
}

/// File names written by [`run_experiment`].
pub mod artifacts {
    pub const CONFIG: &str = "config.json";
    pub const REPORT_CSV: &str = "report.csv";
    pub const REPORT_JSON: &str = "report.json";
    pub const VAL_REPORT_CSV: &str = "val_report.csv";
    pub const PREDICTIONS: &str = "predictions.txt";
    pub const VAL_PREDICTIONS: &str = "val_predictions.txt";
    pub const LOG: &str = "train_log.jsonl";

    pub fn checkpoint(trial: usize) -> String {
        format!("checkpoint_trial{trial}.txt")
    }
}

/// Writes config echo, reports, prediction dumps, per-trial checkpoints and
/// the training log into `out_dir`.
pub fn write_artifacts(result: &ExperimentResult, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(artifacts::CONFIG), result.config.to_json()? + "\n")?;
    fs::write(out_dir.join(artifacts::REPORT_CSV), result.report.to_csv())?;
    fs::write(out_dir.join(artifacts::REPORT_JSON), result.report.to_json()? + "\n")?;
    fs::write(out_dir.join(artifacts::VAL_REPORT_CSV), result.val_report.to_csv())?;
    fs::write(out_dir.join(artifacts::PREDICTIONS), write_predictions(&result.test_predictions))?;
    fs::write(out_dir.join(artifacts::VAL_PREDICTIONS), write_predictions(&result.val_predictions))?;
    for (t, models) in result.models.iter().enumerate() {
        let mut buf = Vec::new();
        write_checkpoint(models, &mut buf)?;
        fs::write(out_dir.join(artifacts::checkpoint(t)), buf)?;
    }
    let mut log = String::new();
    for (t, l) in result.logs.iter().enumerate() {
        for e in &l.epochs {
            let mut v = serde_json::to_value(e)?;
            v["trial"] = t.into();
            log.push_str(&serde_json::to_string(&v)?);
            log.push('\n');
        }
    }
    fs::write(out_dir.join(artifacts::LOG), log)?;
    Ok(())
}

/// [`evaluate_experiment`] followed by [`write_artifacts`].
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResult> {
    let result = evaluate_experiment(cfg)?;
    write_artifacts(&result, out_dir)?;
    Ok(result)
}
