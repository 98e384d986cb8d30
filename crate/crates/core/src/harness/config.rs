//! Experiment configuration (JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jitter::JitterSpec;
use crate::losses::{Family, ObjectiveSpec};
use crate::models::CombinationRule;
use crate::pose::Representation;

/// Environment variable overriding [`ExperimentConfig::seed`].
pub const SEED_ENV: &str = "ORIENT_GEO_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub family: Family,
    pub representation: Representation,
    /// Family default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl ObjectiveConfig {
    pub fn spec(&self) -> Result<ObjectiveSpec> {
        let alpha = self.alpha.unwrap_or_else(|| self.family.default_alpha());
        ObjectiveSpec::with_alpha(self.family, self.representation, alpha)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryConfig {
    /// Number of key poses; family default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Learning-rate factor applied after every epoch.
    pub decay: f64,
    pub epochs: usize,
    /// Samples drawn from every category per mini-batch.
    pub quota: usize,
    /// Epochs of the simple objective run before families that need it.
    pub simple_init_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    /// Random jitter-grid offset per training sample and epoch.
    Jittered,
    /// Jittered plus extra samples from a broader, noise-free "rendered" distribution.
    JitteredExtra,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [Augmentation::None, Augmentation::Jittered, Augmentation::JitteredExtra];

    pub fn as_str(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::Jittered => "jittered",
            Augmentation::JitteredExtra => "jittered_extra",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub categories: usize,
    pub train_per_category: usize,
    pub val_per_category: usize,
    pub test_per_category: usize,
    /// Standard deviation of the feature noise.
    pub noise: f64,
    /// Pose modes per category.
    pub modes: usize,
    /// Standard deviation (radians) of the tangent perturbation around a mode.
    pub mode_spread: f64,
    /// Largest rotation angle of a mode centre (radians).
    pub max_mode_angle: f64,
    pub augmentation: Augmentation,
    pub jitter: JitterSpec,
    /// Extra samples per category (fraction of the train split) for `jittered_extra`.
    pub extra_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub objective: ObjectiveConfig,
    pub dictionary: DictionaryConfig,
    pub feature_dim: usize,
    /// Hidden layer widths of the regression, Bin and shared Delta networks.
    pub hidden: Vec<usize>,
    /// Hidden width of each per-bin Delta network.
    pub per_bin_hidden: usize,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    /// Seed of the synthetic data and, offset by the trial index, of training.
    pub seed: u64,
    pub trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            objective: ObjectiveConfig {
                family: Family::MGp,
                representation: Representation::AxisAngle,
                alpha: None,
            },
            dictionary: DictionaryConfig { k: None, seed: 7 },
            feature_dim: 64,
            hidden: vec![64, 32],
            per_bin_hidden: 16,
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                decay: 0.1,
                epochs: 5,
                quota: 4,
                simple_init_epochs: 1,
            },
            data: DataConfig {
                categories: 12,
                train_per_category: 2000,
                val_per_category: 500,
                test_per_category: 500,
                noise: 0.05,
                modes: 3,
                mode_spread: 0.35,
                max_mode_angle: 2.0,
                augmentation: Augmentation::None,
                jitter: JitterSpec::default(),
                extra_fraction: 0.5,
            },
            seed: 2024,
            trials: 3,
        }
    }
}

impl ExperimentConfig {
    pub fn spec(&self) -> Result<ObjectiveSpec> {
        self.objective.spec()
    }

    /// Dictionary size actually used.
    pub fn k(&self) -> usize {
        self.dictionary.k.unwrap_or_else(|| self.objective.family.default_k())
    }

    pub fn combination_rule(&self) -> Result<CombinationRule> {
        Ok(self.spec()?.rule)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.per_bin_hidden == 0 {
            return bad("hidden sizes must be positive");
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) || !(o.decay > 0.0 && o.decay <= 1.0) {
            return bad("learning_rate must be positive and decay in (0, 1]");
        }
        if o.epochs == 0 || o.quota == 0 {
            return bad("epochs and quota must be positive");
        }
        let d = &self.data;
        if d.categories == 0 || d.categories > crate::eval::CATEGORIES.len() {
            return bad("categories must lie in 1..=12");
        }
        if d.train_per_category == 0 || d.test_per_category == 0 || d.val_per_category == 0 {
            return bad("every split needs samples");
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) || d.modes == 0 || !(d.mode_spread >= 0.0) {
            return bad("noise, modes and mode_spread must be non-negative (modes positive)");
        }
        if !(d.max_mode_angle >= 0.0 && d.max_mode_angle < std::f64::consts::PI) {
            return bad("max_mode_angle must lie in [0, pi)");
        }
        if !(d.extra_fraction >= 0.0 && d.extra_fraction.is_finite()) {
            return bad("extra_fraction must be non-negative");
        }
        d.jitter.validate()?;
        if self.trials == 0 {
            return bad("trials must be positive");
        }
        if spec.family != Family::RG && spec.family != Family::RE && self.k() < 2 {
            return bad("K must be at least 2");
        }
        if self.k() > d.train_per_category {
            return bad("K exceeds the training samples per category");
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `ORIENT_GEO_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("{SEED_ENV}='{v}': {e}")))?;
        }
        Ok(())
    }

    /// Category names in table order.
    pub fn category_names(&self) -> Vec<String> {
        crate::eval::CATEGORIES[..self.data.categories]
            .iter()
            .map(|c| c.to_string())
            .collect()
    }
}
