//! Central finite-difference checks of the analytic objective gradients.

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::dictionary::{default_gamma, PoseDictionary};
use crate::error::Result;
use crate::losses::{objective, Family, NetOutput, ObjectiveSpec, Target};
use crate::pose::Representation;
use crate::so3::{Rotation, UnitQuaternion};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Instances whose internal geodesic values lie this close to 0 or pi are skipped.
    pub exclusion: f64,
    /// Minimum gap between the two largest logits (keeps argmax fixed under the step).
    pub logit_gap: f64,
    /// Dictionary size for random instances.
    pub keys: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            exclusion: 1e-4,
            logit_gap: 1e-2,
            keys: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub family: Family,
    pub representation: Representation,
    pub trials: usize,
    /// Instances discarded for sitting near a non-smooth point.
    pub excluded: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random objective inputs for one instance.
pub struct Instance {
    pub dict: PoseDictionary,
    pub output: NetOutput,
    pub target: Target,
}

fn random_pose<R: Rng>(repr: Representation, max_angle: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let r = Rotation::random(rng);
        if r.angle() > max_angle {
            continue;
        }
        return repr.from_rotation(&r).expect("angle below pi");
    }
}

fn random_dictionary<R: Rng>(repr: Representation, k: usize, rng: &mut R) -> PoseDictionary {
    loop {
        let keys = (0..k).map(|_| random_pose(repr, 2.5, rng)).collect();
        if let Ok(d) = PoseDictionary::new(repr, keys) {
            return d;
        }
    }
}

fn random_logits<R: Rng>(k: usize, gap: f64, rng: &mut R) -> Vec<f64> {
    let n = Normal::new(0.0, 1.5).expect("valid normal");
    loop {
        let l: Vec<f64> = (0..k).map(|_| n.sample(rng)).collect();
        let mut sorted = l.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if k < 2 || sorted[0] - sorted[1] >= gap {
            return l;
        }
    }
}

fn random_vector<R: Rng>(dim: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws a random instance of `spec`'s family.
pub fn random_instance<R: Rng>(spec: &ObjectiveSpec, cfg: &GradcheckConfig, rng: &mut R) -> Instance {
    let repr = spec.representation;
    let dict = random_dictionary(repr, cfg.keys, rng);
    let gamma = default_gamma(&dict).ok();
    let pose = random_pose(repr, 2.8, rng);
    let target = if spec.family.is_regression() {
        Target::regression(repr, pose).expect("valid pose")
    } else {
        Target::new(&dict, pose, gamma).expect("valid pose")
    };
    let output = match spec.family {
        Family::RG | Family::RE => match repr {
            Representation::AxisAngle => NetOutput::Pose(random_vector(3, 1.0, rng)),
            Representation::Quaternion => {
                let q = UnitQuaternion::from_vector(Vector4::from_column_slice(&random_vector(4, 1.0, rng)))
                    .expect("nonzero");
                NetOutput::Pose(q.vector().as_slice().to_vec())
            }
        },
        Family::C => NetOutput::Logits(random_logits(cfg.keys, cfg.logit_gap, rng)),
        f => {
            let n = if f.per_bin() { cfg.keys } else { 1 };
            let scale = if repr == Representation::Quaternion { 0.3 } else { 0.4 };
            NetOutput::BinDelta {
                logits: random_logits(cfg.keys, cfg.logit_gap, rng),
                deltas: (0..n).map(|_| random_vector(repr.dim(), scale, rng)).collect(),
            }
        }
    };
    Instance { dict, output, target }
}

fn flatten(out: &NetOutput) -> Vec<f64> {
    match out {
        NetOutput::Pose(y) => y.clone(),
        NetOutput::Logits(l) => l.clone(),
        NetOutput::BinDelta { logits, deltas } => {
            let mut v = logits.clone();
            deltas.iter().for_each(|d| v.extend_from_slice(d));
            v
        }
    }
}

fn unflatten(template: &NetOutput, v: &[f64]) -> NetOutput {
    match template {
        NetOutput::Pose(_) => NetOutput::Pose(v.to_vec()),
        NetOutput::Logits(_) => NetOutput::Logits(v.to_vec()),
        NetOutput::BinDelta { logits, deltas } => {
            let k = logits.len();
            let dim = deltas[0].len();
            NetOutput::BinDelta {
                logits: v[..k].to_vec(),
                deltas: v[k..].chunks(dim).map(|c| c.to_vec()).collect(),
            }
        }
    }
}

/// Relative error between the analytic and numerical gradients, or `None`
/// when the instance sits in an excluded neighbourhood.
pub fn check_instance(
    spec: &ObjectiveSpec,
    inst: &Instance,
    cfg: &GradcheckConfig,
) -> Result<Option<f64>> {
    let base = objective(spec, &inst.dict, &inst.output, &inst.target)?;
    if base.margin < cfg.exclusion {
        return Ok(None);
    }
    let mut analytic = match &inst.output {
        NetOutput::Pose(_) => base.d_pose.clone(),
        _ => base.d_logits.clone(),
    };
    for d in &base.d_deltas {
        analytic.extend_from_slice(d);
    }
    let x = flatten(&inst.output);
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += cfg.step;
        xm[i] -= cfg.step;
        let fp = objective(spec, &inst.dict, &unflatten(&inst.output, &xp), &inst.target)?;
        let fm = objective(spec, &inst.dict, &unflatten(&inst.output, &xm), &inst.target)?;
        if fp.margin < cfg.exclusion || fm.margin < cfg.exclusion {
            return Ok(None);
        }
        numeric.push((fp.value - fm.value) / (2.0 * cfg.step));
    }
    Ok(Some(relative_error(&analytic, &numeric)))
}

/// `||a - n|| / max(||a||, ||n||, 1e-8)`.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Checks `trials` non-excluded random instances of one family.
pub fn gradcheck_family(
    family: Family,
    representation: Representation,
    trials: usize,
    seed: u64,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let spec = ObjectiveSpec::new(family, representation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        family,
        representation,
        trials: 0,
        excluded: 0,
        max_rel_error: 0.0,
        failures: 0,
    };
    while report.trials < trials {
        let inst = random_instance(&spec, cfg, &mut rng);
        match check_instance(&spec, &inst, cfg)? {
            None => report.excluded += 1,
            Some(err) => {
                report.trials += 1;
                report.max_rel_error = report.max_rel_error.max(err);
                if !(err <= cfg.tolerance) {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Families valid for a representation.
pub fn families_for(representation: Representation) -> Vec<Family> {
    Family::ALL
        .iter()
        .copied()
        .filter(|f| representation == Representation::AxisAngle || !f.riemannian())
        .collect()
}
