//! Pose vectors: the flat axis-angle (3) or quaternion (4) targets networks regress.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{exp_so3, quaternion_matrix, AxisAngle, Rotation, UnitQuaternion, MAX_AXIS_ANGLE_NORM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    AxisAngle,
    Quaternion,
}

impl Representation {
    pub fn dim(self) -> usize {
        match self {
            Representation::AxisAngle => 3,
            Representation::Quaternion => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Representation::AxisAngle => "axis_angle",
            Representation::Quaternion => "quaternion",
        }
    }

    pub(crate) fn check(self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Rotation denoted by a raw network output.
    ///
    /// Axis-angle vectors of any norm go through Rodrigues directly (the
    /// rotation is the same one [`AxisAngle::from_unconstrained`] would give);
    /// quaternions are normalized.
    pub fn to_rotation(self, v: &[f64]) -> Result<Rotation> {
        self.check(v)?;
        match self {
            Representation::AxisAngle => Ok(Rotation::from_matrix_unchecked(exp_so3(
                &Vector3::from_column_slice(v),
            ))),
            Representation::Quaternion => {
                let q = Vector4::from_column_slice(v);
                let n = q.norm();
                if n < 1e-12 {
                    return Err(Error::ZeroSum);
                }
                Ok(Rotation::from_matrix_unchecked(quaternion_matrix(&(q / n))))
            }
        }
    }

    /// Canonical pose vector of a rotation.
    pub fn from_rotation(self, r: &Rotation) -> Result<Vec<f64>> {
        match self {
            Representation::AxisAngle => Ok(crate::so3::log_map(r)?.vector().as_slice().to_vec()),
            Representation::Quaternion => Ok(r.to_quaternion().vector().as_slice().to_vec()),
        }
    }

    /// Projects a vector onto the valid set: axis-angle norms strictly below
    /// `pi`, quaternions unit-norm on the `c >= 0` hemisphere.
    pub fn sanitize(self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        match self {
            Representation::AxisAngle => {
                let y = Vector3::from_column_slice(v);
                let n = y.norm();
                let y = if n >= MAX_AXIS_ANGLE_NORM {
                    y * (MAX_AXIS_ANGLE_NORM / n)
                } else {
                    y
                };
                Ok(y.as_slice().to_vec())
            }
            Representation::Quaternion => {
                let q = UnitQuaternion::from_vector(Vector4::from_column_slice(v))?;
                Ok(q.vector().as_slice().to_vec())
            }
        }
    }

    /// Whether `v` satisfies the representation's invariants.
    pub fn is_valid(self, v: &[f64]) -> bool {
        if v.len() != self.dim() || !v.iter().all(|x| x.is_finite()) {
            return false;
        }
        match self {
            Representation::AxisAngle => AxisAngle::new(Vector3::from_column_slice(v)).is_ok(),
            Representation::Quaternion => {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (n - 1.0).abs() <= 1e-9 && v[0] >= 0.0
            }
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axis_angle" | "axis-angle" | "aa" => Ok(Representation::AxisAngle),
            "quaternion" | "quat" => Ok(Representation::Quaternion),
            other => Err(Error::Config(format!("unknown representation '{other}'"))),
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
