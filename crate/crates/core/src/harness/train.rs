//! Single-threaded training loop.
//!
//! Every mini-batch holds `quota` samples from each category. Categories own
//! separate networks, so a batch updates each category's networks from its
//! own samples. The learning rate is `lr * decay^epoch`; families with a
//! simple counterpart first train that objective for `simple_init_epochs`,
//! then restart the schedule with fresh Adam moments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{default_gamma, fit_kmeans, PoseDictionary};
use crate::error::{Error, Result};
use crate::harness::config::{Augmentation, ExperimentConfig};
use crate::harness::data::{extra_samples, featurize, jitter_rotation, stream_seed, CategoryData, Split, SyntheticDataset};
use crate::harness::model::{AdamState, Architecture, CategoryModel};
use crate::losses::{euclidean_loss, geodesic_loss, objective, Family, LossValue, NetOutput, ObjectiveSpec, Target};
use crate::models::MlpGrads;
use crate::so3::Rotation;

const STREAM_DICT: u64 = 10;
const STREAM_INIT: u64 = 11;
const STREAM_BATCH: u64 = 12;
const STREAM_AUGMENT: u64 = 13;
const STREAM_EXTRA: u64 = 14;

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// `"init"` for the simple-objective warm-up, `"main"` otherwise.
    pub phase: String,
    pub family: Family,
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Mean per-sample loss over all categories.
    pub mean_loss: f64,
    pub category_loss: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Mean per-sample loss of every step, in order.
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub models: Vec<CategoryModel>,
    pub log: TrainingLog,
}

pub fn architecture(cfg: &ExperimentConfig) -> Architecture {
    Architecture {
        feature_dim: cfg.feature_dim,
        hidden: cfg.hidden.clone(),
        per_bin_hidden: cfg.per_bin_hidden,
    }
}

/// K-means dictionary of one category's training poses. It depends only on
/// the dictionary seed, so every trial shares it.
pub fn fit_dictionary(cfg: &ExperimentConfig, index: usize, cat: &CategoryData) -> Result<PoseDictionary> {
    let repr = cfg.objective.representation;
    let poses = cat
        .train
        .rotations
        .iter()
        .map(|r| repr.from_rotation(r))
        .collect::<Result<Vec<_>>>()?;
    fit_kmeans(repr, &poses, cfg.k(), stream_seed(cfg.dictionary.seed, index, STREAM_DICT))
}

/// Dictionaries for every category, or `None` for pure regression.
pub fn fit_dictionaries(cfg: &ExperimentConfig, data: &SyntheticDataset) -> Result<Vec<Option<PoseDictionary>>> {
    let spec = cfg.spec()?;
    data.categories
        .iter()
        .enumerate()
        .map(|(c, cat)| {
            if spec.family.is_regression() {
                Ok(None)
            } else {
                fit_dictionary(cfg, c, cat).map(Some)
            }
        })
        .collect()
}

/// Trains with `cfg.seed` as the trial seed.
pub fn train(cfg: &ExperimentConfig, data: &SyntheticDataset) -> Result<TrainedModel> {
    let dicts = fit_dictionaries(cfg, data)?;
    train_with_seed(cfg, data, &dicts, cfg.seed)
}

fn supervision(spec: &ObjectiveSpec, dict: Option<&PoseDictionary>, gamma: Option<f64>, r: &Rotation) -> Result<Target> {
    let pose = spec.representation.from_rotation(r)?;
    match dict {
        Some(d) => Target::new(d, pose, gamma),
        None => Target::regression(spec.representation, pose),
    }
}

fn sample_loss(spec: &ObjectiveSpec, dict: Option<&PoseDictionary>, out: &NetOutput, t: &Target) -> Result<LossValue> {
    match (dict, out) {
        (Some(d), _) => objective(spec, d, out, t),
        (None, NetOutput::Pose(y)) if spec.family == Family::RG => geodesic_loss(spec.representation, y, &t.pose),
        (None, NetOutput::Pose(y)) => euclidean_loss(y, &t.pose),
        _ => Err(Error::FamilyMismatch(format!("{} without a dictionary", spec.family))),
    }
}

struct CategoryState {
    model: CategoryModel,
    adam: Vec<AdamState>,
    pool: Split,
    targets: Vec<Target>,
    /// Samples below this index are real and may be jittered; the rest are extra.
    real: usize,
    gamma: Option<f64>,
    batch_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
}

/// Trains one model per category from the trial seed `seed`. `dicts` comes
/// from [`fit_dictionaries`].
pub fn train_with_seed(
    cfg: &ExperimentConfig,
    data: &SyntheticDataset,
    dicts: &[Option<PoseDictionary>],
    seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let main = cfg.spec()?;
    let arch = architecture(cfg);
    let mut phases = Vec::new();
    if let Some(simple) = main.family.simple_init_family() {
        if cfg.optimizer.simple_init_epochs > 0 {
            phases.push(("init", ObjectiveSpec::new(simple, main.representation)?, cfg.optimizer.simple_init_epochs));
        }
    }
    phases.push(("main", main, cfg.optimizer.epochs));

    let mut states = Vec::with_capacity(data.categories.len());
    for (c, cat) in data.categories.iter().enumerate() {
        let dict = dicts.get(c).cloned().flatten();
        let gamma = match &dict {
            Some(d) if main.family.relaxed() => Some(default_gamma(d)?),
            _ => None,
        };
        let model = CategoryModel::init(&cat.name, main, dict, &arch, |i| {
            stream_seed(seed, c, STREAM_INIT + 100 * i as u64)
        })?;
        let mut pool = cat.train.clone();
        let real = pool.len();
        if cfg.data.augmentation == Augmentation::JitteredExtra {
            let n = (cfg.data.extra_fraction * real as f64).round() as usize;
            let extra = extra_samples(cat, data.mode_spread, n, stream_seed(cfg.seed, c, STREAM_EXTRA));
            pool.features.extend(extra.features);
            pool.rotations.extend(extra.rotations);
        }
        let targets = pool
            .rotations
            .iter()
            .map(|r| supervision(&main, model.dictionary.as_ref(), gamma, r))
            .collect::<Result<Vec<_>>>()?;
        let adam = model.networks.all().into_iter().map(AdamState::new).collect();
        states.push(CategoryState {
            model,
            adam,
            pool,
            targets,
            real,
            gamma,
            batch_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, c, STREAM_BATCH)),
            augment_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, c, STREAM_AUGMENT)),
        });
    }

    let quota = cfg.optimizer.quota;
    let steps = states.iter().map(|s| s.pool.len()).max().unwrap_or(0).div_ceil(quota).max(1);
    let mut log = TrainingLog::default();
    for (phase, spec, epochs) in phases {
        for s in &mut states {
            s.model.spec = spec;
            s.adam = s.model.networks.all().into_iter().map(AdamState::new).collect();
        }
        for epoch in 0..epochs {
            let lr = cfg.optimizer.learning_rate * cfg.optimizer.decay.powi(epoch as i32);
            let orders: Vec<Vec<usize>> = states
                .iter_mut()
                .map(|s| {
                    let mut o: Vec<usize> = (0..s.pool.len()).collect();
                    o.shuffle(&mut s.batch_rng);
                    o
                })
                .collect();
            let mut totals = vec![0.0; states.len()];
            for step in 0..steps {
                let mut step_total = 0.0;
                for (c, s) in states.iter_mut().enumerate() {
                    let order = &orders[c];
                    let batch: Vec<usize> = (0..quota).map(|j| order[(step * quota + j) % order.len()]).collect();
                    let loss = train_batch(cfg, &data.categories[c], s, &spec, &batch, lr)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            category: s.model.category.clone(),
                            epoch,
                            step,
                        });
                    }
                    totals[c] += loss;
                    step_total += loss;
                }
                log.step_losses.push(step_total / states.len() as f64);
            }
            let category_loss: Vec<f64> = totals.iter().map(|t| t / steps as f64).collect();
            log.epochs.push(EpochLog {
                phase: phase.to_string(),
                family: spec.family,
                epoch,
                learning_rate: lr,
                steps,
                mean_loss: category_loss.iter().sum::<f64>() / category_loss.len() as f64,
                category_loss,
            });
        }
    }
    let models = states
        .into_iter()
        .map(|mut s| {
            s.model.spec = main;
            s.model
        })
        .collect();
    Ok(TrainedModel { models, log })
}

/// One Adam step on a category's networks; returns the mean sample loss.
fn train_batch(
    cfg: &ExperimentConfig,
    cat: &CategoryData,
    s: &mut CategoryState,
    spec: &ObjectiveSpec,
    batch: &[usize],
    lr: f64,
) -> Result<f64> {
    let nets = s.model.networks.all();
    let mut grads: Vec<MlpGrads> = nets.iter().map(|n| MlpGrads::zeros_like(n)).collect();
    let mut touched = vec![false; grads.len()];
    let mut total = 0.0;
    for &i in batch {
        let jittered = if cfg.data.augmentation != Augmentation::None && i < s.real {
            jitter_rotation(&s.pool.rotations[i], &cfg.data.jitter, &mut s.augment_rng)
        } else {
            None
        };
        let (features, target) = match jittered {
            Some(r) => (
                featurize(&cat.hidden_map, &r, cfg.data.noise, &mut s.augment_rng),
                supervision(spec, s.model.dictionary.as_ref(), s.gamma, &r)?,
            ),
            None => (s.pool.features[i].clone(), s.targets[i].clone()),
        };
        let (out, caches) = s.model.output_cached(&features)?;
        let l = sample_loss(spec, s.model.dictionary.as_ref(), &out, &target)?;
        total += l.value;
        s.model.backward(&caches, &l.d_pose, &l.d_logits, &l.d_deltas, &mut grads, &mut touched);
    }
    let n = batch.len() as f64;
    for ((net, adam), (g, t)) in s
        .model
        .networks
        .all_mut()
        .into_iter()
        .zip(s.adam.iter_mut())
        .zip(grads.iter_mut().zip(&touched))
    {
        if *t {
            g.scale(1.0 / n);
            adam.step(net, g, lr);
        }
    }
    Ok(total / n)
}
