use std::fs;

use nalgebra::Vector3;
use orient_geo::dictionary::fit_kmeans;
use orient_geo::harness::ablation::{ablation_grid, ALPHA_SWEEP, K_SWEEP};
use orient_geo::harness::data::sample_pose;
use orient_geo::harness::experiment::{artifacts, evaluate_experiment, read_predictions};
use orient_geo::harness::model::Networks;
use orient_geo::harness::train::{fit_dictionaries, train_with_seed};
use orient_geo::harness::*;
use orient_geo::losses::Family;
use orient_geo::pose::Representation;
use orient_geo::so3::{exp_so3, Rotation};
use orient_geo::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(family: Family) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.name = "small".into();
    c.objective.family = family;
    c.data.categories = 3;
    c.data.train_per_category = 300;
    c.data.val_per_category = 60;
    c.data.test_per_category = 60;
    c.dictionary.k = Some(8);
    c.optimizer.epochs = 2;
    c.trials = 1;
    c
}

#[test]
fn identical_seeds_give_identical_weights() {
    for fam in [Family::RG, Family::MGp, Family::MP] {
        let cfg = small(fam);
        let data = generate_synthetic(&cfg, cfg.seed).unwrap();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a, b);
        let dicts = fit_dictionaries(&cfg, &data).unwrap();
        let c = train_with_seed(&cfg, &data, &dicts, cfg.seed + 1).unwrap();
        assert_ne!(a.models, c.models);
    }
}

#[test]
fn jittered_training_is_deterministic() {
    for aug in [Augmentation::Jittered, Augmentation::JitteredExtra] {
        let mut cfg = small(Family::MG);
        cfg.data.augmentation = aug;
        let data = generate_synthetic(&cfg, cfg.seed).unwrap();
        assert_eq!(train(&cfg, &data).unwrap(), train(&cfg, &data).unwrap());
    }
}

#[test]
fn splits_are_disjoint() {
    let cfg = small(Family::MG);
    let data = generate_synthetic(&cfg, cfg.seed).unwrap();
    for cat in &data.categories {
        let key = |r: &Rotation| r.to_row_major().map(f64::to_bits);
        let train: std::collections::HashSet<_> = cat.train.rotations.iter().map(key).collect();
        for r in cat.val.rotations.iter().chain(&cat.test.rotations) {
            assert!(!train.contains(&key(r)));
        }
        assert!(cat.train.features.iter().flatten().all(|v| v.is_finite()));
    }
}

#[test]
fn category_data_does_not_depend_on_other_categories_or_split_sizes() {
    let cfg = small(Family::MG);
    let base = generate_synthetic(&cfg, 5).unwrap();
    let mut more = cfg.clone();
    more.data.categories = 5;
    more.data.test_per_category = 90;
    let other = generate_synthetic(&more, 5).unwrap();
    for (a, b) in base.categories.iter().zip(&other.categories) {
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test.rotations[..], b.test.rotations[..60]);
    }
}

#[test]
fn antipodal_modes_give_bimodal_label_histogram() {
    // modes at +y and -y in tangent coordinates
    let v = Vector3::new(0.3, -0.5, 0.8).normalize() * 1.4;
    let modes = vec![
        Rotation::from_matrix_unchecked(exp_so3(&v)),
        Rotation::from_matrix_unchecked(exp_so3(&-v)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let poses: Vec<Vec<f64>> = (0..2000)
        .map(|_| Representation::AxisAngle.from_rotation(&sample_pose(&modes, 0.15, &mut rng)).unwrap())
        .collect();
    let dict = fit_kmeans(Representation::AxisAngle, &poses, 8, 1).unwrap();
    let mut hist = vec![0usize; dict.len()];
    for p in &poses {
        hist[dict.hard_label(p)] += 1;
    }
    let u = v.normalize();
    let proj = |k: usize| Vector3::from_column_slice(dict.key(k)).dot(&u);
    let (mut plus, mut minus) = (0, 0);
    for (k, &n) in hist.iter().enumerate() {
        if n == 0 {
            continue;
        }
        // every populated key sits near one of the modes, none in between
        assert!(proj(k).abs() > 0.7, "key {k} at {}", proj(k));
        if proj(k) > 0.0 {
            plus += n;
        } else {
            minus += n;
        }
    }
    let frac = plus as f64 / (plus + minus) as f64;
    assert!((0.4..=0.6).contains(&frac), "{frac}");
}

fn quarter_means(v: &[f64]) -> Vec<f64> {
    let q = v.len() / 4;
    (0..4).map(|i| v[i * q..(i + 1) * q].iter().sum::<f64>() / q as f64).collect()
}

#[test]
fn first_epoch_loss_trends_down_on_noise_free_data() {
    for fam in [Family::RE, Family::RG, Family::MGp] {
        let mut cfg = small(fam);
        cfg.data.noise = 0.0;
        cfg.data.train_per_category = 800;
        let data = generate_synthetic(&cfg, cfg.seed).unwrap();
        let t = train(&cfg, &data).unwrap();
        let steps = t.log.epochs[0].steps;
        let q = quarter_means(&t.log.step_losses[..steps]);
        for w in q.windows(2) {
            assert!(w[1] <= w[0], "{fam}: {q:?}");
        }
    }
}

#[test]
fn simple_init_epochs_are_logged_first() {
    let cfg = small(Family::MGp);
    let data = generate_synthetic(&cfg, cfg.seed).unwrap();
    let log = train(&cfg, &data).unwrap().log;
    assert_eq!(log.epochs.len(), cfg.optimizer.simple_init_epochs + cfg.optimizer.epochs);
    assert_eq!(log.epochs[0].phase, "init");
    assert_eq!(log.epochs[0].family, Family::MSp);
    assert_eq!(log.epochs[1].phase, "main");
    assert_eq!(log.epochs[1].learning_rate, cfg.optimizer.learning_rate);
    assert_eq!(log.epochs[2].learning_rate, cfg.optimizer.learning_rate * cfg.optimizer.decay);
}

#[test]
fn per_bin_checkpoint_has_k_delta_heads_and_roundtrips() {
    let cfg = small(Family::MGp);
    let data = generate_synthetic(&cfg, cfg.seed).unwrap();
    let models = train(&cfg, &data).unwrap().models;
    let mut buf = Vec::new();
    write_checkpoint(&models, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back, models);
    for m in &back {
        match &m.networks {
            Networks::BinDelta { bin, deltas } => {
                assert_eq!(deltas.len(), 8);
                assert_eq!(bin.output_dim(), 8);
            }
            _ => panic!("expected bin & delta networks"),
        }
    }
    let shared = {
        let cfg = small(Family::MG);
        let data = generate_synthetic(&cfg, cfg.seed).unwrap();
        train(&cfg, &data).unwrap().models
    };
    assert!(matches!(&shared[0].networks, Networks::BinDelta { deltas, .. } if deltas.len() == 1));
}

#[test]
fn report_is_recomputable_from_prediction_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Family::MG);
    cfg.trials = 2;
    let r = run_experiment(&cfg, dir.path()).unwrap();
    let dump = read_predictions(fs::read_to_string(dir.path().join(artifacts::PREDICTIONS)).unwrap().as_bytes()).unwrap();
    assert_eq!(dump, r.test_predictions);
    let again = report_from_predictions(&dump, &cfg.category_names()).unwrap();
    assert_eq!(again.to_csv(), fs::read_to_string(dir.path().join(artifacts::REPORT_CSV)).unwrap());
    let echoed = ExperimentConfig::load(&dir.path().join(artifacts::CONFIG)).unwrap();
    assert_eq!(echoed, cfg);
    for t in 0..2 {
        let text = fs::read_to_string(dir.path().join(artifacts::checkpoint(t))).unwrap();
        assert_eq!(read_checkpoint(text.as_bytes()).unwrap(), r.models[t]);
    }
    let log = fs::read_to_string(dir.path().join(artifacts::LOG)).unwrap();
    assert_eq!(log.lines().count(), 2 * (1 + cfg.optimizer.epochs));
}

#[test]
fn regression_families_share_the_test_split() {
    let a = evaluate_experiment(&small(Family::RE)).unwrap();
    let b = evaluate_experiment(&small(Family::RG)).unwrap();
    let truths = |r: &ExperimentResult| r.test_predictions.iter().map(|p| p.truth).collect::<Vec<_>>();
    assert_eq!(truths(&a), truths(&b));
    assert!(a.report.row("Floor").is_none());
}

fn mean(report: &orient_geo::eval::MetricReport, row: &str) -> f64 {
    report.row(row).unwrap().mean
}

#[test]
fn classification_cannot_beat_the_floor_but_bin_delta_can() {
    let mut cfg = small(Family::C);
    cfg.data.noise = 0.0;
    cfg.data.categories = 2;
    cfg.data.train_per_category = 1000;
    cfg.dictionary.k = Some(16);
    cfg.optimizer.epochs = 5;
    let c = evaluate_experiment(&cfg).unwrap();
    for (m, f) in c.report.row("MedErr").unwrap().values.iter().zip(&c.report.row("Floor").unwrap().values) {
        assert!(*m >= f - 1e-9, "{m} < floor {f}");
    }
    cfg.objective.family = Family::MGp;
    let g = evaluate_experiment(&cfg).unwrap();
    assert_eq!(mean(&g.report, "Floor"), mean(&c.report, "Floor"));
    assert!(mean(&g.report, "MedErr") < mean(&g.report, "Floor"));
}

#[test]
fn non_finite_loss_aborts_training() {
    let mut cfg = small(Family::RE);
    cfg.optimizer.learning_rate = 1e300;
    let data = generate_synthetic(&cfg, cfg.seed).unwrap();
    match train(&cfg, &data) {
        Err(Error::NonFiniteLoss { category, .. }) => assert_eq!(category, "aero"),
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|t| t.log.epochs.len())),
    }
}

#[test]
fn seed_environment_variable_overrides_config() {
    let mut cfg = ExperimentConfig::default();
    std::env::set_var(config::SEED_ENV, "99");
    cfg.apply_env().unwrap();
    std::env::remove_var(config::SEED_ENV);
    assert_eq!(cfg.seed, 99);
}

#[test]
fn ablation_grid_has_one_cell_per_sweep_value() {
    let cfg = ExperimentConfig::default();
    let grid = ablation_grid(&cfg).unwrap();
    assert_eq!(grid.len(), 2 + K_SWEEP.len() + ALPHA_SWEEP.len() + Augmentation::ALL.len());
    let count = |s: &str| grid.iter().filter(|g| g.0 == s).count();
    assert_eq!((count("representation"), count("k"), count("alpha"), count("augmentation")), (2, 4, 3, 3));
    let mut r = cfg.clone();
    r.objective.family = Family::MR;
    assert!(ablation_grid(&r).is_err());
}

#[test]
fn ablation_cells_reproduce_from_their_echoed_config() {
    let mut base = small(Family::MG);
    base.data.categories = 1;
    base.data.train_per_category = 420;
    base.data.val_per_category = 30;
    base.data.test_per_category = 30;
    base.optimizer.epochs = 1;
    base.dictionary.k = None;
    let dir = tempfile::tempdir().unwrap();
    let report = ablation_suite(&base, Some(dir.path())).unwrap();
    assert_eq!(report.cells.len(), 12);
    let alpha: Vec<_> = report.cells.iter().filter(|c| c.sweep == "alpha").collect();
    let best = alpha.iter().map(|c| c.val_mederr).fold(f64::INFINITY, f64::min);
    let selected: Vec<_> = report.cells.iter().filter(|c| c.selected).collect();
    assert_eq!(selected.len(), 1);
    assert_eq!(selected[0].sweep, "alpha");
    assert_eq!(selected[0].val_mederr, best);
    for cell in report.cells.iter().filter(|c| c.sweep == "k" || c.sweep == "augmentation") {
        let cell_dir = dir.path().join("cells").join(cell.dir_name());
        let cfg = ExperimentConfig::load(&cell_dir.join(artifacts::CONFIG)).unwrap();
        let again = evaluate_experiment(&cfg).unwrap();
        assert_eq!(again.report.to_csv(), fs::read_to_string(cell_dir.join(artifacts::REPORT_CSV)).unwrap());
    }
    let table = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 13);
}
