//! Ablation sweeps around a base configuration, merged into one table.
//!
//! Sweeps: representation (axis-angle, quaternion), dictionary size
//! (50, 100, 200, 400), alpha (0.1, 1, 10) and augmentation (none, jittered,
//! jittered + extra). Every cell is an independent experiment, so cells run in
//! parallel; each cell is deterministic on its own.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{Augmentation, ExperimentConfig};
use crate::harness::experiment::{evaluate_experiment, write_artifacts};
use crate::pose::Representation;

pub const K_SWEEP: [usize; 4] = [50, 100, 200, 400];
pub const ALPHA_SWEEP: [f64; 3] = [0.1, 1.0, 10.0];

/// One sweep cell and its results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub sweep: String,
    pub value: String,
    pub config: ExperimentConfig,
    pub val_mederr: f64,
    pub test_mederr: f64,
    pub test_mederr_std: f64,
    pub test_acc: f64,
    pub test_acc_std: f64,
    /// Set on the alpha cell with the lowest validation MedErr.
    pub selected: bool,
}

impl AblationCell {
    /// Directory name of the cell's artifacts.
    pub fn dir_name(&self) -> String {
        format!("{}-{}", self.sweep, self.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

fn cell_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

impl AblationReport {
    pub fn best_alpha(&self) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.selected)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "sweep,value,family,representation,k,alpha,augmentation,val_mederr,test_mederr,test_mederr_std,test_acc_pi6,test_acc_pi6_std,selected\n",
        );
        for c in &self.cells {
            let spec = c.config.spec().expect("validated config");
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.sweep,
                c.value,
                spec.family,
                spec.representation,
                c.config.k(),
                spec.alpha,
                c.config.data.augmentation.as_str(),
                cell_value(c.val_mederr),
                cell_value(c.test_mederr),
                cell_value(c.test_mederr_std),
                cell_value(c.test_acc),
                cell_value(c.test_acc_std),
                c.selected
            )
            .expect("write to string");
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The sweep cells `(sweep, value, config)` derived from `base`.
pub fn ablation_grid(base: &ExperimentConfig) -> Result<Vec<(String, String, ExperimentConfig)>> {
    base.validate()?;
    let spec = base.spec()?;
    if spec.family.riemannian() {
        return Err(Error::Config(format!(
            "{} has no quaternion form; the representation sweep needs another base family",
            spec.family
        )));
    }
    let mut cells = Vec::new();
    for r in [Representation::AxisAngle, Representation::Quaternion] {
        let mut c = base.clone();
        c.objective.representation = r;
        cells.push(("representation".to_string(), r.as_str().to_string(), c));
    }
    for k in K_SWEEP {
        let mut c = base.clone();
        c.dictionary.k = Some(k);
        cells.push(("k".to_string(), k.to_string(), c));
    }
    for a in ALPHA_SWEEP {
        let mut c = base.clone();
        c.objective.alpha = Some(a);
        cells.push(("alpha".to_string(), a.to_string(), c));
    }
    for aug in Augmentation::ALL {
        let mut c = base.clone();
        c.data.augmentation = aug;
        cells.push(("augmentation".to_string(), aug.as_str().to_string(), c));
    }
    for (_, _, c) in &cells {
        c.validate()?;
    }
    Ok(cells)
}

/// Runs every cell of [`ablation_grid`]. With `out_dir`, each cell's
/// artifacts go to `out_dir/cells/<sweep>-<value>/` and the merged table to
/// `out_dir/ablation.csv` and `out_dir/ablation.json`.
pub fn ablation_suite(base: &ExperimentConfig, out_dir: Option<&Path>) -> Result<AblationReport> {
    let grid = ablation_grid(base)?;
    let mut cells = grid
        .into_par_iter()
        .map(|(sweep, value, config)| {
            let r = evaluate_experiment(&config)?;
            let row = |name: &str, rep: &crate::eval::MetricReport| rep.row(name).map_or(f64::NAN, |r| r.mean);
            let cell = AblationCell {
                val_mederr: row("MedErr", &r.val_report),
                test_mederr: row("MedErr", &r.report),
                test_mederr_std: row("MedErr_std", &r.report),
                test_acc: row("Acc_pi/6", &r.report),
                test_acc_std: row("Acc_pi/6_std", &r.report),
                selected: false,
                sweep,
                value,
                config,
            };
            if let Some(dir) = out_dir {
                write_artifacts(&r, &dir.join("cells").join(cell.dir_name()))?;
            }
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;
    let best = cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.sweep == "alpha")
        .min_by(|a, b| a.1.val_mederr.total_cmp(&b.1.val_mederr))
        .map(|(i, _)| i);
    if let Some(i) = best {
        cells[i].selected = true;
    }
    let report = AblationReport { cells };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), report.to_csv())?;
        fs::write(dir.join("ablation.json"), report.to_json()? + "\n")?;
    }
    Ok(report)
}
