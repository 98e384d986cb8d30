//! Rotation representations on SO(3).
//!
//! A [`Rotation`] is the canonical representation. [`AxisAngle`] vectors are
//! tangent coordinates at the identity (angle times unit axis, angle in
//! `[0, pi)`), [`UnitQuaternion`]s are kept on the `c >= 0` hemisphere so that
//! `q` and `-q` share one representative, and [`EulerZXZ`] follows
//! `R = Rz(ct) * Rx(el) * Rz(az)`.
//!
//! Angles below [`SMALL_ANGLE`] use first-order series for the exponential and
//! logarithm maps. Every `acos` argument is clamped to `[-1, 1]`.

use std::f64::consts::{PI, TAU};
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Below this angle the exp/log maps switch to series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// `log_map` rejects rotations with `tr(R) <= -1 + NEAR_PI_TRACE`.
///
/// This admits every angle up to `pi - 3.2e-4`.
pub const NEAR_PI_TRACE: f64 = 1e-7;

/// `|sin(el)|` below this makes the ZXZ decomposition ambiguous.
pub const GIMBAL_EPS: f64 = 1e-8;

/// Tolerance on `R^T R = I` (Frobenius) and `det R = 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Norm that axis-angle vectors at (or wrapping onto) exactly `pi` are pulled back to.
pub const MAX_AXIS_ANGLE_NORM: f64 = PI - 1e-6;

/// Skew-symmetric matrix `[v]x` with `[v]x w = v x w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part `(m - m^T) / 2`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

pub(crate) fn clamp_unit(u: f64) -> f64 {
    u.clamp(-1.0, 1.0)
}

/// Rodrigues' formula for an arbitrary rotation vector (any norm).
pub fn exp_so3(y: &Vector3<f64>) -> Matrix3<f64> {
    let theta = y.norm();
    let k = hat(y);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + k * a + k * k * b
}

/// Logarithm for any rotation matrix, including angles at or near `pi`.
///
/// Returns a vector of norm in `[0, pi]`. At exactly `pi` the axis sign is
/// fixed by making its largest-magnitude component positive.
pub fn log_so3_any(m: &Matrix3<f64>) -> Vector3<f64> {
    let tr = m.trace();
    let cos_t = clamp_unit(0.5 * (tr - 1.0));
    let w = vee(m);
    let sin_t = w.norm();
    let theta = sin_t.atan2(cos_t);
    if theta < SMALL_ANGLE {
        return w * (1.0 + theta * theta / 6.0);
    }
    if tr > -1.0 + NEAR_PI_TRACE {
        return w * (theta / sin_t);
    }
    // v v^T = (R + R^T - 2 cos(t) I) / (2 (1 - cos(t)))
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_t;
    let denom = 1.0 - cos_t;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = sym.column(best).into_owned() / denom;
    axis /= axis.norm();
    if sin_t > 1e-12 {
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
    } else {
        let lead = axis.iamax();
        if axis[lead] < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// Proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    /// Validates orthonormality and unit determinant.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entry".into()));
        }
        let resid = (m.transpose() * m - Matrix3::identity()).norm();
        if resid > ORTHONORMAL_TOL {
            return Err(Error::InvalidRotation(format!(
                "orthonormality residual {resid:e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidRotation(format!("determinant {det}")));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix already known to be a rotation (products of rotations etc).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Nearest rotation in Frobenius norm, via SVD.
    pub fn project(m: &Matrix3<f64>) -> Result<Self> {
        let svd = m.svd(true, true);
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return Err(Error::InvalidRotation("SVD failed".into())),
        };
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Ok(Self(u * d * vt))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn about_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Uniformly distributed rotation (Haar measure).
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let v = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let q = UnitQuaternion::from_vector(v).expect("gaussian sample has nonzero norm");
        q.to_rotation()
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        clamp_unit(0.5 * (self.0.trace() - 1.0)).acos()
    }

    pub fn to_quaternion(&self) -> UnitQuaternion {
        rotation_to_quaternion(self)
    }

    pub fn to_euler(&self) -> Result<EulerZXZ> {
        rotation_to_euler(self)
    }

    /// Flattened row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul for &Rotation {
    type Output = Rotation;

    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Rotation vector `theta * v` with `theta in [0, pi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(Vector3<f64>);

impl AxisAngle {
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n >= PI {
            return Err(Error::InvalidRotation(format!(
                "axis-angle norm {n} outside [0, pi)"
            )));
        }
        Ok(Self(v))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    /// Representative with norm `< pi` of the rotation `exp([v]x)`.
    ///
    /// Norms at or above `pi` are reduced modulo `2 pi` and, past `pi`,
    /// re-expressed about the opposite axis; this leaves the rotation
    /// unchanged. A result landing exactly on `pi` is pulled back to
    /// [`MAX_AXIS_ANGLE_NORM`].
    pub fn from_unconstrained(v: Vector3<f64>) -> Self {
        let theta = v.norm();
        if theta < PI {
            return Self(v);
        }
        let t = theta.rem_euclid(TAU);
        let mut signed = if t < PI { t } else { t - TAU };
        if signed.abs() >= MAX_AXIS_ANGLE_NORM {
            signed = signed.signum() * MAX_AXIS_ANGLE_NORM;
        }
        Self(v * (signed / theta))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn to_rotation(&self) -> Rotation {
        exp_map(self)
    }

    pub fn to_quaternion(&self) -> UnitQuaternion {
        let theta = self.0.norm();
        let half = 0.5 * theta;
        // sin(theta/2) / theta
        let k = if theta < SMALL_ANGLE {
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        UnitQuaternion::from_components_unchecked(
            half.cos(),
            k * self.0.x,
            k * self.0.y,
            k * self.0.z,
        )
    }
}

/// Unit quaternion `(c, s1, s2, s3)` on the canonical hemisphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion(Vector4<f64>);

impl UnitQuaternion {
    /// Requires unit norm within [`ORTHONORMAL_TOL`]; canonicalizes the sign.
    pub fn new(c: f64, s1: f64, s2: f64, s3: f64) -> Result<Self> {
        let v = Vector4::new(c, s1, s2, s3);
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidRotation(format!("quaternion norm {n}")));
        }
        Ok(Self(canonicalize(v / n)))
    }

    /// Normalizes an arbitrary nonzero 4-vector.
    pub fn from_vector(v: Vector4<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::ZeroSum);
        }
        Ok(Self(canonicalize(v / n)))
    }

    fn from_components_unchecked(c: f64, s1: f64, s2: f64, s3: f64) -> Self {
        Self(canonicalize(Vector4::new(c, s1, s2, s3)))
    }

    pub fn identity() -> Self {
        Self(Vector4::new(1.0, 0.0, 0.0, 0.0))
    }

    /// Components as `(c, s1, s2, s3)`.
    pub fn vector(&self) -> &Vector4<f64> {
        &self.0
    }

    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn to_rotation(&self) -> Rotation {
        Rotation(quaternion_matrix(&self.0))
    }

    /// Fails only for a rotation by exactly `pi` (`c == 0`).
    pub fn to_axis_angle(&self) -> Result<AxisAngle> {
        let c = self.0[0];
        let s = Vector3::new(self.0[1], self.0[2], self.0[3]);
        let n = s.norm();
        let theta = 2.0 * n.atan2(c);
        if theta >= PI {
            return Err(Error::NearPiRotation { trace: -1.0 });
        }
        let k = if n < SMALL_ANGLE { 2.0 / c } else { theta / n };
        Ok(AxisAngle(s * k))
    }
}

fn canonicalize(v: Vector4<f64>) -> Vector4<f64> {
    let flip = if v[0] != 0.0 {
        v[0] < 0.0
    } else {
        v.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0)
    };
    if flip {
        -v
    } else {
        v
    }
}

/// Rotation matrix of a (not necessarily canonical) unit 4-vector.
pub fn quaternion_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn rotation_to_quaternion(r: &Rotation) -> UnitQuaternion {
    // Shepperd: pivot on the largest of (trace, diagonal entries).
    let m = &r.0;
    let tr = m.trace();
    let v = if tr >= m[(0, 0)] && tr >= m[(1, 1)] && tr >= m[(2, 2)] {
        let s = (1.0 + tr).sqrt() * 2.0;
        Vector4::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Vector4::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    UnitQuaternion(canonicalize(v / v.norm()))
}

/// Exponential map `R = I + sin(t) [v]x + (1 - cos(t)) [v]x^2`.
pub fn exp_map(y: &AxisAngle) -> Rotation {
    Rotation(exp_so3(&y.0))
}

/// Logarithm map onto `||y|| < pi`.
///
/// Rotations with `tr(R) <= -1 + NEAR_PI_TRACE` have no numerically stable
/// axis and are rejected with [`Error::NearPiRotation`].
pub fn log_map(r: &Rotation) -> Result<AxisAngle> {
    let tr = r.0.trace();
    if tr <= -1.0 + NEAR_PI_TRACE {
        return Err(Error::NearPiRotation { trace: tr });
    }
    let cos_t = clamp_unit(0.5 * (tr - 1.0));
    let w = vee(&r.0);
    let sin_t = w.norm();
    let theta = sin_t.atan2(cos_t);
    let y = if theta < SMALL_ANGLE {
        w * (1.0 + theta * theta / 6.0)
    } else {
        w * (theta / sin_t)
    };
    Ok(AxisAngle(y))
}

/// `acos((tr(R1^T R2) - 1) / 2)` in `[0, pi]`.
pub fn geodesic_distance(r1: &Rotation, r2: &Rotation) -> f64 {
    let tr = r1.0.component_mul(&r2.0).sum();
    clamp_unit(0.5 * (tr - 1.0)).acos().abs()
}

/// `2 acos(|<q1, q2>|)`.
pub fn quat_distance(q1: &UnitQuaternion, q2: &UnitQuaternion) -> f64 {
    2.0 * q1.dot(q2).abs().min(1.0).acos()
}

/// ZXZ Euler angles in radians: `R = Rz(ct) Rx(el) Rz(az)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EulerZXZ {
    pub az: f64,
    pub el: f64,
    pub ct: f64,
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

impl EulerZXZ {
    /// Wraps `az` and `ct` into `[-pi, pi)`; `el` must lie in `[-pi, pi]`.
    pub fn new(az: f64, el: f64, ct: f64) -> Result<Self> {
        if !(az.is_finite() && el.is_finite() && ct.is_finite()) {
            return Err(Error::InvalidRotation("non-finite Euler angle".into()));
        }
        if el.abs() > PI {
            return Err(Error::InvalidRotation(format!("elevation {el} outside [-pi, pi]")));
        }
        Ok(Self {
            az: wrap_angle(az),
            el,
            ct: wrap_angle(ct),
        })
    }

    pub fn from_degrees(az: f64, el: f64, ct: f64) -> Result<Self> {
        Self::new(az.to_radians(), el.to_radians(), ct.to_radians())
    }

    pub fn to_degrees(&self) -> (f64, f64, f64) {
        (self.az.to_degrees(), self.el.to_degrees(), self.ct.to_degrees())
    }

    pub fn to_rotation(&self) -> Rotation {
        euler_to_rotation(self)
    }
}

pub fn euler_to_rotation(e: &EulerZXZ) -> Rotation {
    Rotation::about_z(e.ct) * Rotation::about_x(e.el) * Rotation::about_z(e.az)
}

/// Inverse of [`euler_to_rotation`], returning `el` in `[0, pi]`.
pub fn rotation_to_euler(r: &Rotation) -> Result<EulerZXZ> {
    let m = &r.0;
    let sin_el = m[(2, 0)].hypot(m[(2, 1)]);
    if sin_el < GIMBAL_EPS {
        return Err(Error::GimbalLock { sin_el });
    }
    let el = sin_el.atan2(m[(2, 2)]);
    let az = m[(2, 0)].atan2(m[(2, 1)]);
    let ct = m[(0, 2)].atan2(-m[(1, 2)]);
    Ok(EulerZXZ {
        az: wrap_angle(az),
        el,
        ct: wrap_angle(ct),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn rz90() -> Matrix3<f64> {
        Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let r = exp_map(&AxisAngle::zero());
        assert_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn exp_of_quarter_turn_about_z() {
        let r = exp_map(&AxisAngle::new(Vector3::new(0.0, 0.0, FRAC_PI_2)).unwrap());
        assert!((r.matrix() - rz90()).norm() < 1e-15);
    }

    #[test]
    fn log_inverts_the_canonical_examples() {
        let y = log_map(&Rotation::identity()).unwrap();
        assert_eq!(*y.vector(), Vector3::zeros());
        let y = log_map(&Rotation::new(rz90()).unwrap()).unwrap();
        assert!((y.vector() - Vector3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-15);
    }

    #[test]
    fn log_rejects_half_turn() {
        let r = Rotation::about_x(PI);
        assert!(matches!(log_map(&r), Err(Error::NearPiRotation { .. })));
    }

    #[test]
    fn log_of_tiny_rotation_uses_series() {
        let y = Vector3::new(3e-9, -1e-9, 2e-9);
        let back = log_map(&exp_map(&AxisAngle::new(y).unwrap())).unwrap();
        assert!((back.vector() - y).norm() < 1e-20);
    }

    #[test]
    fn robust_log_handles_half_turn() {
        let v = log_so3_any(Rotation::about_y(PI).matrix());
        assert!((v - Vector3::new(0.0, PI, 0.0)).norm() < 1e-12);
        let r = Rotation::about_z(PI - 1e-5);
        let v = log_so3_any(r.matrix());
        assert!((exp_so3(&v) - r.matrix()).norm() < 1e-12);
    }

    #[test]
    fn geodesic_examples() {
        let r = Rotation::about_x(0.3);
        assert_eq!(geodesic_distance(&r, &r), 0.0);
        let d = geodesic_distance(&Rotation::identity(), &Rotation::about_z(FRAC_PI_2));
        assert!((d - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn quaternion_distance_examples() {
        let a = UnitQuaternion::identity();
        assert_eq!(quat_distance(&a, &a), 0.0);
        let h = 0.5f64.sqrt();
        let b = UnitQuaternion::new(h, 0.0, 0.0, h).unwrap();
        assert!((quat_distance(&a, &b) - FRAC_PI_2).abs() < 1e-12);
        let q = UnitQuaternion::new(0.5, 0.5, -0.5, 0.5).unwrap();
        let neg = UnitQuaternion::new(-0.5, -0.5, 0.5, -0.5).unwrap();
        assert_eq!(quat_distance(&q, &neg), 0.0);
    }

    #[test]
    fn quaternion_canonical_hemisphere() {
        let q = UnitQuaternion::new(-0.6, 0.8, 0.0, 0.0).unwrap();
        assert!(q.vector()[0] > 0.0);
        let tie = UnitQuaternion::new(0.0, 0.0, -1.0, 0.0).unwrap();
        assert_eq!(*tie.vector(), Vector4::new(0.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn axis_angle_quaternion_examples() {
        let q = AxisAngle::new(Vector3::new(0.0, 0.0, FRAC_PI_2))
            .unwrap()
            .to_quaternion();
        let c = (PI / 4.0).cos();
        assert!((q.vector() - Vector4::new(c, 0.0, 0.0, c)).norm() < 1e-15);
        let y = UnitQuaternion::identity().to_axis_angle().unwrap();
        assert_eq!(*y.vector(), Vector3::zeros());
    }

    #[test]
    fn euler_examples() {
        let e = EulerZXZ::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(*euler_to_rotation(&e).matrix(), Matrix3::identity());
        let e = EulerZXZ::new(FRAC_PI_2, 0.0, 0.0).unwrap();
        assert!((euler_to_rotation(&e).matrix() - rz90()).norm() < 1e-15);
    }

    #[test]
    fn euler_inverse_flags_gimbal_lock() {
        let r = Rotation::about_z(0.7);
        assert!(matches!(rotation_to_euler(&r), Err(Error::GimbalLock { .. })));
    }

    #[test]
    fn euler_inverse_recovers_angles() {
        let e = EulerZXZ::new(2.5, 0.4, -1.2).unwrap();
        let back = rotation_to_euler(&euler_to_rotation(&e)).unwrap();
        assert!((back.az - e.az).abs() < 1e-12);
        assert!((back.el - e.el).abs() < 1e-12);
        assert!((back.ct - e.ct).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_axis_angle_keeps_rotation() {
        let v = Vector3::new(2.0, -3.0, 2.5);
        let wrapped = AxisAngle::from_unconstrained(v);
        assert!(wrapped.angle() < PI);
        assert!((exp_so3(wrapped.vector()) - exp_so3(&v)).norm() < 1e-12);
        let exact = AxisAngle::from_unconstrained(Vector3::new(PI, 0.0, 0.0));
        assert!(exact.angle() < PI);
    }

    #[test]
    fn rotation_validation() {
        assert!(Rotation::new(Matrix3::identity() * 1.01).is_err());
        assert!(Rotation::new(-Matrix3::identity()).is_err());
        let off = Rotation::about_y(0.2).matrix() * 1.000_001;
        let fixed = Rotation::project(&off).unwrap();
        assert!(Rotation::new(*fixed.matrix()).is_ok());
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-15);
        assert_eq!(wrap_angle(0.25), 0.25);
    }
}
