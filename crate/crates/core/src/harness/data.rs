//! Synthetic stand-in for CNN features.
//!
//! Every category draws a hidden linear map `W` (feature_dim x 9) and a set
//! of pose modes. A sample's target is a tangent Gaussian perturbation of a
//! random mode; its feature vector is `W vec(R) + noise`. Train, validation
//! and test splits come from independent random streams.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::jitter::{flip_target, JitterSpec};
use crate::so3::{exp_so3, EulerZXZ, Rotation};

/// Targets are kept this far below a half turn.
pub const MAX_TARGET_ANGLE: f64 = std::f64::consts::PI - 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub features: Vec<Vec<f64>>,
    pub rotations: Vec<Rotation>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryData {
    pub name: String,
    /// Hidden map from `vec(R)` (row-major) to features.
    pub hidden_map: DMatrix<f64>,
    pub modes: Vec<Rotation>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub categories: Vec<CategoryData>,
    pub noise: f64,
    pub mode_spread: f64,
}

/// Independent seed for a (category, stream) pair.
pub fn stream_seed(seed: u64, category: usize, stream: u64) -> u64 {
    // splitmix64 finalizer over the packed inputs
    let mut z = seed
        .wrapping_add((category as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_MAP: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VAL: u64 = 3;
const STREAM_TEST: u64 = 4;

/// `W vec(R) + noise * N(0, I)`.
pub fn featurize<R: Rng>(map: &DMatrix<f64>, r: &Rotation, noise: f64, rng: &mut R) -> Vec<f64> {
    let x = DVector::from_row_slice(&r.to_row_major());
    let mut f = map * x;
    if noise > 0.0 {
        for v in f.iter_mut() {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    f.as_slice().to_vec()
}

/// Random mode, then `exp(e) R_m` with `e ~ N(0, spread^2 I)`, rejecting
/// angles above [`MAX_TARGET_ANGLE`].
pub fn sample_pose<R: Rng>(modes: &[Rotation], spread: f64, rng: &mut R) -> Rotation {
    loop {
        let m = &modes[rng.random_range(0..modes.len())];
        let e = Vector3::from_fn(|_, _| spread * rng.sample::<f64, _>(StandardNormal));
        let r = Rotation::from_matrix_unchecked(exp_so3(&e) * m.matrix());
        if r.angle() <= MAX_TARGET_ANGLE {
            return r;
        }
    }
}

fn random_modes<R: Rng>(n: usize, max_angle: f64, rng: &mut R) -> Vec<Rotation> {
    (0..n)
        .map(|_| loop {
            let r = Rotation::random(rng);
            if r.angle() <= max_angle {
                break r;
            }
        })
        .collect()
}

fn hidden_map<R: Rng>(feature_dim: usize, rng: &mut R) -> DMatrix<f64> {
    // vec(R) has norm sqrt(3), so features have roughly unit variance
    let n = Normal::new(0.0, 1.0 / 3f64.sqrt()).expect("valid normal");
    DMatrix::from_fn(feature_dim, 9, |_, _| n.sample(rng))
}

fn draw_split<R: Rng>(
    map: &DMatrix<f64>,
    modes: &[Rotation],
    spread: f64,
    noise: f64,
    n: usize,
    rng: &mut R,
) -> Split {
    let mut features = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    for _ in 0..n {
        let r = sample_pose(modes, spread, rng);
        features.push(featurize(map, &r, noise, rng));
        rotations.push(r);
    }
    Split { features, rotations }
}

/// Deterministic synthetic dataset for `cfg` and `seed`.
pub fn generate_synthetic(cfg: &ExperimentConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let d = &cfg.data;
    let categories = cfg
        .category_names()
        .into_iter()
        .enumerate()
        .map(|(c, name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, c, STREAM_MAP));
            let hidden_map = hidden_map(cfg.feature_dim, &mut rng);
            let modes = random_modes(d.modes, d.max_mode_angle, &mut rng);
            let split = |stream, n| {
                let mut r = ChaCha8Rng::seed_from_u64(stream_seed(seed, c, stream));
                draw_split(&hidden_map, &modes, d.mode_spread, d.noise, n, &mut r)
            };
            CategoryData {
                train: split(STREAM_TRAIN, d.train_per_category),
                val: split(STREAM_VAL, d.val_per_category),
                test: split(STREAM_TEST, d.test_per_category),
                name,
                hidden_map,
                modes,
            }
        })
        .collect();
    Ok(SyntheticDataset {
        categories,
        noise: d.noise,
        mode_spread: d.mode_spread,
    })
}

/// Extra noise-free samples from a broader version of the category's pose
/// distribution (twice the mode spread).
pub fn extra_samples(cat: &CategoryData, spread: f64, n: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_split(&cat.hidden_map, &cat.modes, 2.0 * spread, 0.0, n, &mut rng)
}

/// Pose after a random offset from the jitter grid (and a mirror with
/// probability 1/2 when the grid enables flipping). Returns `None` when the
/// pose has no unique Euler decomposition or the result nears a half turn.
pub fn jitter_rotation<R: Rng>(r: &Rotation, spec: &JitterSpec, rng: &mut R) -> Option<Rotation> {
    let e = r.to_euler().ok()?;
    let da = spec.d_az[rng.random_range(0..spec.d_az.len())];
    let de = spec.d_el[rng.random_range(0..spec.d_el.len())];
    let dc = spec.d_ct[rng.random_range(0..spec.d_ct.len())];
    let mut t = EulerZXZ::new(e.az + da.to_radians(), e.el + de.to_radians(), e.ct + dc.to_radians()).ok()?;
    if spec.flip && rng.random_bool(0.5) {
        t = flip_target(&t).ok()?;
    }
    let out = t.to_rotation();
    (out.angle() <= MAX_TARGET_ANGLE).then_some(out)
}
