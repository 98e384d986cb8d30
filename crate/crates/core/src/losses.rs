//! Training objectives with hand-derived gradients.
//!
//! Every loss returns a [`LossValue`]: the scalar plus its gradient with
//! respect to each network output it consumes (pose, Bin logits, deltas).
//! Gradients are taken at the *post-activation* outputs; logits are the
//! pre-softmax Bin outputs.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::dictionary::{argmax, softmax, PoseDictionary, SoftAssignment};
use crate::error::{Error, Result};
use crate::models::CombinationRule;
use crate::pose::Representation;
use crate::so3::{clamp_unit, exp_so3, hat, log_so3_any, Rotation};

/// Clamp applied to the `acos` argument when differentiating.
pub const ACOS_CLAMP: f64 = 1e-7;
/// Cap on `|d acos(u) / du|`.
pub const MAX_ACOS_SLOPE: f64 = 1e6;
/// Geodesic values this close to 0 or pi are flagged non-smooth.
pub const NON_SMOOTH_EPS: f64 = 1e-6;

/// Loss value with gradients for each output it depends on.
///
/// Unused gradient slots are empty. `margin` is the smallest distance of any
/// internal geodesic value to the clamped neighbourhoods of `{0, pi}`
/// (negative inside them, infinite when the loss has no geodesic term).
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub d_pose: Vec<f64>,
    pub d_logits: Vec<f64>,
    pub d_deltas: Vec<Vec<f64>>,
    pub margin: f64,
}

impl LossValue {
    fn scalar(value: f64) -> Self {
        Self {
            value,
            d_pose: Vec::new(),
            d_logits: Vec::new(),
            d_deltas: Vec::new(),
            margin: f64::INFINITY,
        }
    }

    pub fn non_smooth(&self) -> bool {
        self.margin < NON_SMOOTH_EPS
    }
}

fn acos_slope(u: f64) -> f64 {
    let u = u.clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP);
    (-1.0 / (1.0 - u * u).sqrt()).max(-MAX_ACOS_SLOPE)
}

/// Distance of `theta` to `[0, lo]` and `[pi - hi, pi]`, the neighbourhoods
/// where the clamped `acos` slope no longer matches the value.
fn margin_of(theta: f64, lo: f64, hi: f64) -> f64 {
    (theta - lo).min(std::f64::consts::PI - hi - theta)
}

fn clamped_angle() -> f64 {
    (1.0 - ACOS_CLAMP).acos()
}

/// Left Jacobian of SO(3): `exp(y + e) ~= exp(J(y) e) exp(y)`.
fn left_jacobian(y: &Vector3<f64>) -> Matrix3<f64> {
    let t = y.norm();
    let k = hat(y);
    let (a, b) = if t < 1e-4 {
        let t2 = t * t;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        ((1.0 - t.cos()) / (t * t), (t - t.sin()) / (t * t * t))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// `d(A, exp(y))` and its gradient in `y`, for any rotation vector `y`.
fn geodesic_aa(y: &Vector3<f64>, a: &Matrix3<f64>) -> (f64, Vector3<f64>, f64) {
    let r = exp_so3(y);
    let tr = a.component_mul(&r).sum();
    let u = 0.5 * (tr - 1.0);
    let theta = clamp_unit(u).acos();
    let m = r * a.transpose();
    let c = Vector3::new(
        m[(1, 2)] - m[(2, 1)],
        m[(2, 0)] - m[(0, 2)],
        m[(0, 1)] - m[(1, 0)],
    );
    let d_tr = left_jacobian(y).transpose() * c;
    let c = clamped_angle();
    (theta, d_tr * (0.5 * acos_slope(u)), margin_of(theta, c, c))
}

/// `2 acos(|<q, q*>|)` and its gradient in `q` (treated as a free 4-vector).
fn geodesic_quat(q: &Vector4<f64>, q_true: &Vector4<f64>) -> (f64, Vector4<f64>, f64) {
    let d = q.dot(q_true);
    let ad = d.abs().min(1.0);
    let theta = 2.0 * ad.acos();
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    (
        theta,
        q_true * (2.0 * acos_slope(ad) * sign),
        margin_of(theta, 2.0 * clamped_angle(), 0.0),
    )
}

/// Geodesic regression loss between a predicted and a true pose vector.
///
/// Axis-angle inputs may have any norm (they are mapped through Rodrigues'
/// formula); quaternion inputs are used as given.
pub fn geodesic_loss(
    representation: Representation,
    y_pred: &[f64],
    y_true: &[f64],
) -> Result<LossValue> {
    representation.check(y_pred)?;
    representation.check(y_true)?;
    let (value, grad, margin) = match representation {
        Representation::AxisAngle => {
            let a = exp_so3(&Vector3::from_column_slice(y_true));
            let (v, g, m) = geodesic_aa(&Vector3::from_column_slice(y_pred), &a);
            (v, g.as_slice().to_vec(), m)
        }
        Representation::Quaternion => {
            let (v, g, m) = geodesic_quat(
                &Vector4::from_column_slice(y_pred),
                &Vector4::from_column_slice(y_true),
            );
            (v, g.as_slice().to_vec(), m)
        }
    };
    Ok(LossValue {
        d_pose: grad,
        margin,
        ..LossValue::scalar(value)
    })
}

/// `||y_pred - y_true||^2`.
pub fn euclidean_loss(y_pred: &[f64], y_true: &[f64]) -> Result<LossValue> {
    if y_pred.len() != y_true.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    let diff: Vec<f64> = y_pred.iter().zip(y_true).map(|(a, b)| a - b).collect();
    Ok(LossValue {
        d_pose: diff.iter().map(|d| 2.0 * d).collect(),
        ..LossValue::scalar(diff.iter().map(|d| d * d).sum())
    })
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<LossValue> {
    if label >= logits.len() {
        return Err(Error::DimensionMismatch {
            expected: logits.len(),
            got: label + 1,
        });
    }
    let ls = log_softmax(logits);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok(LossValue {
        d_logits: grad,
        ..LossValue::scalar(-ls[label])
    })
}

/// `KL(p* || softmax(logits))` with `0 log 0 = 0`.
pub fn kl_divergence(p_true: &SoftAssignment, logits: &[f64]) -> Result<LossValue> {
    if p_true.p.len() != logits.len() {
        return Err(Error::DimensionMismatch {
            expected: logits.len(),
            got: p_true.p.len(),
        });
    }
    let ls = log_softmax(logits);
    let value: f64 = p_true
        .p
        .iter()
        .zip(&ls)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * (p.ln() - l))
        .sum();
    let grad = softmax(logits)
        .iter()
        .zip(&p_true.p)
        .map(|(q, p)| q - p)
        .collect();
    Ok(LossValue {
        d_logits: grad,
        ..LossValue::scalar(value.max(0.0))
    })
}

/// Objective families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Family {
    /// Geodesic regression.
    RG,
    /// Euclidean regression.
    RE,
    /// Classification over key poses.
    C,
    MG,
    MGp,
    MR,
    MRp,
    MP,
    MPp,
    MX,
    MXp,
    MXP,
    MXPp,
    MS,
    MSp,
    MLE,
    MLEp,
}

impl Family {
    pub const ALL: [Family; 17] = [
        Family::RG,
        Family::RE,
        Family::C,
        Family::MG,
        Family::MGp,
        Family::MR,
        Family::MRp,
        Family::MP,
        Family::MPp,
        Family::MX,
        Family::MXp,
        Family::MXP,
        Family::MXPp,
        Family::MS,
        Family::MSp,
        Family::MLE,
        Family::MLEp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::RG => "R_G",
            Family::RE => "R_E",
            Family::C => "C",
            Family::MG => "M_G",
            Family::MGp => "M_G+",
            Family::MR => "M_R",
            Family::MRp => "M_R+",
            Family::MP => "M_P",
            Family::MPp => "M_P+",
            Family::MX => "M_X",
            Family::MXp => "M_X+",
            Family::MXP => "M_XP",
            Family::MXPp => "M_XP+",
            Family::MS => "M_S",
            Family::MSp => "M_S+",
            Family::MLE => "M_LE",
            Family::MLEp => "M_LE+",
        }
    }

    pub fn is_regression(self) -> bool {
        matches!(self, Family::RG | Family::RE)
    }

    pub fn is_bin_delta(self) -> bool {
        !matches!(self, Family::RG | Family::RE | Family::C)
    }

    /// One Delta network per key pose.
    pub fn per_bin(self) -> bool {
        matches!(
            self,
            Family::MGp
                | Family::MRp
                | Family::MPp
                | Family::MXp
                | Family::MXPp
                | Family::MSp
                | Family::MLEp
        )
    }

    /// Regression term weighted by the Bin probabilities over all keys.
    pub fn probabilistic(self) -> bool {
        matches!(self, Family::MP | Family::MPp | Family::MXP | Family::MXPp)
    }

    /// Classification term is a KL divergence to soft assignments.
    pub fn relaxed(self) -> bool {
        matches!(self, Family::MX | Family::MXp | Family::MXP | Family::MXPp)
    }

    /// Uses `exp(z) exp(dy)` composition (axis-angle only).
    pub fn riemannian(self) -> bool {
        matches!(self, Family::MR | Family::MRp | Family::MLE | Family::MLEp)
    }

    /// Objective trained for one epoch before this family, if any.
    pub fn simple_init_family(self) -> Option<Family> {
        match self {
            Family::RG => Some(Family::RE),
            Family::MG | Family::MR => Some(Family::MS),
            Family::MGp | Family::MRp => Some(Family::MSp),
            _ => None,
        }
    }

    pub fn default_alpha(self) -> f64 {
        if self.per_bin() {
            10.0
        } else {
            1.0
        }
    }

    pub fn default_k(self) -> usize {
        if self.per_bin() {
            crate::dictionary::DEFAULT_K_PER_BIN
        } else {
            crate::dictionary::DEFAULT_K_SHARED
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('p', "+").replace("++", "+");
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s || f.name() == norm || f.name().replace('_', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown objective family '{s}'")))
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        f.name().to_string()
    }
}

impl TryFrom<String> for Family {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Family plus its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub family: Family,
    pub alpha: f64,
    pub representation: Representation,
    pub rule: CombinationRule,
}

impl ObjectiveSpec {
    /// Default alpha and the family's combination rule.
    pub fn new(family: Family, representation: Representation) -> Result<Self> {
        Self::with_alpha(family, representation, family.default_alpha())
    }

    pub fn with_alpha(family: Family, representation: Representation, alpha: f64) -> Result<Self> {
        let rule = if family.riemannian() {
            CombinationRule::Riemannian
        } else {
            CombinationRule::additive_for(representation)
        };
        let spec = Self {
            family,
            alpha,
            representation,
            rule,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::FamilyMismatch(format!("alpha must be positive, got {}", self.alpha)));
        }
        self.rule.check(self.representation)?;
        if self.family.riemannian() != (self.rule == CombinationRule::Riemannian) {
            return Err(Error::FamilyMismatch(format!(
                "{} cannot use combination rule {:?}",
                self.family, self.rule
            )));
        }
        Ok(())
    }
}

/// Supervision for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub pose: Vec<f64>,
    pub rotation: Rotation,
    /// Hard key-pose label (nearest key).
    pub label: usize,
    /// Soft assignment, present when a gamma was supplied.
    pub soft: Option<SoftAssignment>,
    /// `y* - z_{l*}`, the Simple Bin & Delta regression target.
    pub residual: Vec<f64>,
}

impl Target {
    pub fn new(dict: &PoseDictionary, pose: Vec<f64>, gamma: Option<f64>) -> Result<Self> {
        let repr = dict.representation();
        repr.check(&pose)?;
        let rotation = repr.to_rotation(&pose)?;
        let label = dict.hard_label(&pose);
        let soft = gamma.map(|g| dict.soft_assign(&pose, g));
        let residual = pose.iter().zip(dict.key(label)).map(|(a, b)| a - b).collect();
        Ok(Self {
            pose,
            rotation,
            label,
            soft,
            residual,
        })
    }

    /// Target for pure regression (no dictionary).
    pub fn regression(representation: Representation, pose: Vec<f64>) -> Result<Self> {
        let rotation = representation.to_rotation(&pose)?;
        Ok(Self {
            pose,
            rotation,
            label: 0,
            soft: None,
            residual: Vec::new(),
        })
    }
}

/// Raw outputs of a pose model.
#[derive(Clone, Debug, PartialEq)]
pub enum NetOutput {
    Pose(Vec<f64>),
    Logits(Vec<f64>),
    BinDelta { logits: Vec<f64>, deltas: Vec<Vec<f64>> },
}

struct RegTerm {
    value: f64,
    grad: Vec<f64>,
    margin: f64,
}

/// Geodesic loss between the target and `g(z_k, delta)`, gradient in `delta`.
fn composed_geodesic(
    spec: &ObjectiveSpec,
    dict: &PoseDictionary,
    k: usize,
    delta: &[f64],
    target: &Target,
) -> Result<RegTerm> {
    let key = dict.key(k);
    match spec.rule {
        CombinationRule::Additive => {
            let y: Vec<f64> = key.iter().zip(delta).map(|(a, b)| a + b).collect();
            let l = geodesic_loss(spec.representation, &y, &target.pose)?;
            Ok(RegTerm {
                value: l.value,
                grad: l.d_pose,
                margin: l.margin,
            })
        }
        CombinationRule::QuaternionRenorm => {
            let s = Vector4::from_column_slice(key) + Vector4::from_column_slice(delta);
            let n = s.norm();
            if n < 1e-12 {
                return Err(Error::ZeroSum);
            }
            let q = s / n;
            let (value, g_q, margin) = geodesic_quat(&q, &Vector4::from_column_slice(&target.pose));
            let g_s = (g_q - q * q.dot(&g_q)) / n;
            Ok(RegTerm {
                value,
                grad: g_s.as_slice().to_vec(),
                margin,
            })
        }
        CombinationRule::Riemannian => {
            let a = dict.key_rotation(k).matrix().transpose() * target.rotation.matrix();
            let (value, g, margin) = geodesic_aa(&Vector3::from_column_slice(delta), &a);
            Ok(RegTerm {
                value,
                grad: g.as_slice().to_vec(),
                margin,
            })
        }
    }
}

/// `log(R_k^T R*)`, the Log-Euclidean regression target for key `k`.
pub fn log_euclidean_target(dict: &PoseDictionary, k: usize, target: &Rotation) -> Vec<f64> {
    let m = dict.key_rotation(k).matrix().transpose() * target.matrix();
    log_so3_any(&m).as_slice().to_vec()
}

fn check_bin_delta<'a>(
    spec: &ObjectiveSpec,
    dict: &PoseDictionary,
    out: &'a NetOutput,
) -> Result<(&'a [f64], &'a [Vec<f64>])> {
    let (logits, deltas) = match out {
        NetOutput::BinDelta { logits, deltas } => (logits.as_slice(), deltas.as_slice()),
        _ => {
            return Err(Error::FamilyMismatch(format!(
                "{} needs Bin logits and deltas",
                spec.family
            )))
        }
    };
    if logits.len() != dict.len() {
        return Err(Error::DimensionMismatch {
            expected: dict.len(),
            got: logits.len(),
        });
    }
    let want = if spec.family.per_bin() { dict.len() } else { 1 };
    if deltas.len() != want {
        return Err(Error::FamilyMismatch(format!(
            "{} expects {want} delta vector(s), got {}",
            spec.family,
            deltas.len()
        )));
    }
    for d in deltas {
        spec.representation.check(d)?;
    }
    Ok((logits, deltas))
}

fn classification_term(spec: &ObjectiveSpec, logits: &[f64], target: &Target) -> Result<LossValue> {
    if spec.family.relaxed() {
        let soft = target.soft.as_ref().ok_or_else(|| {
            Error::FamilyMismatch(format!("{} needs soft-assignment targets", spec.family))
        })?;
        kl_divergence(soft, logits)
    } else {
        cross_entropy(logits, target.label)
    }
}

/// Per-sample objective value and gradients for any family.
pub fn objective(
    spec: &ObjectiveSpec,
    dict: &PoseDictionary,
    out: &NetOutput,
    target: &Target,
) -> Result<LossValue> {
    spec.validate()?;
    if dict.representation() != spec.representation {
        return Err(Error::FamilyMismatch(format!(
            "dictionary is {} but objective uses {}",
            dict.representation(),
            spec.representation
        )));
    }
    match spec.family {
        Family::RG | Family::RE => {
            let y = match out {
                NetOutput::Pose(y) => y,
                _ => return Err(Error::FamilyMismatch(format!("{} needs a pose output", spec.family))),
            };
            if spec.family == Family::RG {
                geodesic_loss(spec.representation, y, &target.pose)
            } else {
                euclidean_loss(y, &target.pose)
            }
        }
        Family::C => match out {
            NetOutput::Logits(l) => cross_entropy(l, target.label),
            _ => Err(Error::FamilyMismatch("C needs logits".into())),
        },
        f if f.probabilistic() => {
            let (logits, deltas) = check_bin_delta(spec, dict, out)?;
            let cls = classification_term(spec, logits, target)?;
            let p = softmax(logits);
            let terms = (0..dict.len())
                .map(|k| {
                    let d = if f.per_bin() { &deltas[k] } else { &deltas[0] };
                    composed_geodesic(spec, dict, k, d, target)
                })
                .collect::<Result<Vec<_>>>()?;
            let expected: f64 = p.iter().zip(&terms).map(|(pk, t)| pk * t.value).sum();
            let mut d_logits = cls.d_logits;
            for (j, g) in d_logits.iter_mut().enumerate() {
                *g += spec.alpha * p[j] * (terms[j].value - expected);
            }
            let dim = spec.representation.dim();
            let mut d_deltas = vec![vec![0.0; dim]; deltas.len()];
            for (k, t) in terms.iter().enumerate() {
                let slot = if f.per_bin() { k } else { 0 };
                for (acc, g) in d_deltas[slot].iter_mut().zip(&t.grad) {
                    *acc += spec.alpha * p[k] * g;
                }
            }
            Ok(LossValue {
                value: spec.alpha * expected + cls.value,
                d_pose: Vec::new(),
                d_logits,
                d_deltas,
                margin: terms.iter().map(|t| t.margin).fold(f64::INFINITY, f64::min),
            })
        }
        Family::MS | Family::MSp => {
            let (logits, deltas) = check_bin_delta(spec, dict, out)?;
            let cls = cross_entropy(logits, target.label)?;
            let slot = if spec.family.per_bin() { target.label } else { 0 };
            let reg = euclidean_loss(&deltas[slot], &target.residual)?;
            // alpha weights the regression term for M_S, the classification term for M_S+
            let (w_reg, w_cls) = if spec.family == Family::MS {
                (spec.alpha, 1.0)
            } else {
                (1.0, spec.alpha)
            };
            let mut d_deltas = vec![vec![0.0; spec.representation.dim()]; deltas.len()];
            d_deltas[slot] = reg.d_pose.iter().map(|g| w_reg * g).collect();
            Ok(LossValue {
                value: w_reg * reg.value + w_cls * cls.value,
                d_pose: Vec::new(),
                d_logits: cls.d_logits.iter().map(|g| w_cls * g).collect(),
                d_deltas,
                margin: f64::INFINITY,
            })
        }
        Family::MLE | Family::MLEp => {
            let (logits, deltas) = check_bin_delta(spec, dict, out)?;
            let cls = cross_entropy(logits, target.label)?;
            let l = argmax(logits);
            let slot = if spec.family.per_bin() { l } else { 0 };
            let tangent = log_euclidean_target(dict, l, &target.rotation);
            let reg = euclidean_loss(&deltas[slot], &tangent)?;
            let mut d_deltas = vec![vec![0.0; 3]; deltas.len()];
            d_deltas[slot] = reg.d_pose.iter().map(|g| spec.alpha * g).collect();
            Ok(LossValue {
                value: cls.value + spec.alpha * reg.value,
                d_pose: Vec::new(),
                d_logits: cls.d_logits,
                d_deltas,
                margin: f64::INFINITY,
            })
        }
        // M_G, M_G+, M_R, M_R+, M_X, M_X+: regression at the argmax key
        _ => {
            let (logits, deltas) = check_bin_delta(spec, dict, out)?;
            let cls = classification_term(spec, logits, target)?;
            let l = argmax(logits);
            let slot = if spec.family.per_bin() { l } else { 0 };
            let reg = composed_geodesic(spec, dict, l, &deltas[slot], target)?;
            let mut d_deltas = vec![vec![0.0; spec.representation.dim()]; deltas.len()];
            d_deltas[slot] = reg.grad.iter().map(|g| spec.alpha * g).collect();
            Ok(LossValue {
                value: spec.alpha * reg.value + cls.value,
                d_pose: Vec::new(),
                d_logits: cls.d_logits,
                d_deltas,
                margin: reg.margin,
            })
        }
    }
}

/// Regression part of the M_R objective at key `k` (unweighted geodesic).
pub fn riemannian_regression_term(
    dict: &PoseDictionary,
    k: usize,
    delta: &[f64],
    target: &Rotation,
) -> f64 {
    let a = dict.key_rotation(k).matrix().transpose() * target.matrix();
    geodesic_aa(&Vector3::from_column_slice(delta), &a).0
}

/// Regression part of the M_LE objective at key `k` (unweighted, squared).
pub fn log_euclidean_regression_term(
    dict: &PoseDictionary,
    k: usize,
    delta: &[f64],
    target: &Rotation,
) -> f64 {
    let t = log_euclidean_target(dict, k, target);
    t.iter().zip(delta).map(|(a, b)| (a - b) * (a - b)).sum()
}
