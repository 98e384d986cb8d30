//! 3D pose jittering.
//!
//! A sample is a point cloud seen by a [`Camera`] whose rotation is the
//! object pose `R(az, el, ct)`. Each grid offset yields a new Euler target and
//! the image warp that realizes it: offsets in `ct` alone are in-plane
//! rotations about the principal point, anything touching `az` or `el` is a
//! DLT homography fitted to the projections of the points nearest the camera.
//! Warps act on point sets; no pixels are resampled.

use std::io::Write;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{EulerZXZ, Rotation};

/// Depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Relative singular-value threshold of the DLT rank test.
const RANK_TOL: f64 = 1e-10;

/// Pinhole camera: `x_cam = R p + t`, `u ~ K x_cam`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    rotation: Rotation,
    translation: Vector3<f64>,
}

impl Camera {
    pub fn new(intrinsics: Matrix3<f64>, rotation: Rotation, translation: Vector3<f64>) -> Result<Self> {
        let k = &intrinsics;
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !upper || !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || k[(2, 2)] == 0.0 {
            return Err(Error::DegenerateConfiguration(
                "intrinsics must be upper triangular with positive focal entries".into(),
            ));
        }
        if !k.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::DegenerateConfiguration("non-finite camera parameter".into()));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Intrinsics `[[f, 0, cx], [0, f, cy], [0, 0, 1]]`.
    pub fn simple(focal: f64, cx: f64, cy: f64, rotation: Rotation, translation: Vector3<f64>) -> Result<Self> {
        Self::new(
            Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0),
            rotation,
            translation,
        )
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        let k = &self.intrinsics;
        Vector2::new(k[(0, 2)], k[(1, 2)]) / k[(2, 2)]
    }

    pub fn with_rotation(&self, rotation: Rotation) -> Self {
        Self {
            rotation,
            ..self.clone()
        }
    }

    /// Point in camera coordinates.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    /// Inverse projection of a pixel at camera-frame depth `depth`.
    pub fn unproject(&self, u: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        let k_inv = self
            .intrinsics
            .try_inverse()
            .ok_or_else(|| Error::DegenerateConfiguration("singular intrinsics".into()))?;
        let ray = k_inv * Vector3::new(u.x, u.y, 1.0);
        let x_cam = ray * (depth / ray.z);
        Ok(self.rotation.matrix().transpose() * (x_cam - self.translation))
    }
}

/// Pinhole projection of object points.
pub fn project(cam: &Camera, points: &[Vector3<f64>]) -> Result<Vec<Vector2<f64>>> {
    points
        .iter()
        .map(|p| {
            let x = cam.to_camera(p);
            if x.z <= MIN_DEPTH {
                return Err(Error::BehindCamera { depth: x.z });
            }
            let u = cam.intrinsics * x;
            Ok(Vector2::new(u.x / u.z, u.y / u.z))
        })
        .collect()
}

/// Planar projective transform, scaled so `||h||_F = 1` with `h22 >= 0`
/// (the first nonzero entry is positive when `h22 = 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let n = m.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::DegenerateConfiguration("zero or non-finite homography".into()));
        }
        let mut h = m / n;
        let pivot = if h[(2, 2)] != 0.0 {
            h[(2, 2)]
        } else {
            h.transpose().iter().copied().find(|x| *x != 0.0).unwrap_or(1.0)
        };
        if pivot < 0.0 {
            h = -h;
        }
        if h.determinant().abs() < 1e-15 {
            return Err(Error::DegenerateConfiguration("singular homography".into()));
        }
        Ok(Self(h))
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is regular")
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let q = self.0 * Vector3::new(p.x, p.y, 1.0);
        Vector2::new(q.x / q.z, q.y / q.z)
    }

    pub fn inverse(&self) -> Self {
        Self::new(self.0.try_inverse().expect("homographies are regular")).expect("regular")
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Homography) -> Self {
        Self::new(self.0 * first.0).expect("product of regular matrices")
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.0[(r, c)];
            }
        }
        out
    }

    /// Largest reprojection error of `src -> dst`, in pixels.
    pub fn max_reprojection_error(&self, src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> f64 {
        src.iter()
            .zip(dst)
            .map(|(s, d)| (self.apply(s) - d).norm())
            .fold(0.0, f64::max)
    }
}

/// Hartley normalization: centroid to the origin, mean distance `sqrt(2)`.
fn normalizer(points: &[Vector2<f64>]) -> Result<Matrix3<f64>> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::DegenerateConfiguration("points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = t * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Normalized direct linear transform estimate of `dst ~ H src`.
pub fn dlt_homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch {
            expected: src.len(),
            got: dst.len(),
        });
    }
    if src.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: src.len(),
        });
    }
    let ts = normalizer(src)?;
    let td = normalizer(dst)?;
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = transform(&ts, s);
        let d = transform(&td, d);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let largest = sv[order[0]];
    if !(sv[order[7]] > RANK_TOL * largest) {
        return Err(Error::DegenerateConfiguration(
            "design matrix has a null space of dimension > 1".into(),
        ));
    }
    let h = v_t.row(order[8]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("singular normalizer".into()))?;
    Homography::new(td_inv * hn * ts)
}

/// Jitter grid in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterSpec {
    pub d_az: Vec<f64>,
    pub d_el: Vec<f64>,
    pub d_ct: Vec<f64>,
    pub flip: bool,
    /// Fraction of points nearest the camera used for the DLT fit.
    pub near_fraction: f64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            d_az: vec![-1.0, 0.0, 1.0],
            d_el: vec![-1.0, 0.0, 1.0],
            d_ct: vec![-4.0, -2.0, 0.0, 2.0, 4.0],
            flip: false,
            near_fraction: 0.2,
        }
    }
}

impl JitterSpec {
    /// The single-offset grid used for flip-only augmentation.
    pub fn none() -> Self {
        Self {
            d_az: vec![0.0],
            d_el: vec![0.0],
            d_ct: vec![0.0],
            flip: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.d_az.iter().chain(&self.d_el).chain(&self.d_ct);
        if all.clone().any(|x| !x.is_finite()) {
            return Err(Error::Config("jitter offsets must be finite".into()));
        }
        if self.d_az.is_empty() || self.d_el.is_empty() || self.d_ct.is_empty() {
            return Err(Error::Config("jitter offset lists must be nonempty".into()));
        }
        if !(self.near_fraction > 0.0 && self.near_fraction <= 1.0) {
            return Err(Error::Config("near_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Grid offsets `(d_az, d_el, d_ct)` in emission order.
    pub fn offsets(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.d_az.len() * self.d_el.len() * self.d_ct.len());
        for &a in &self.d_az {
            for &e in &self.d_el {
                for &c in &self.d_ct {
                    out.push((a, e, c));
                }
            }
        }
        out
    }

    /// Number of emitted variants per sample.
    pub fn variant_count(&self) -> usize {
        let n = self.d_az.len() * self.d_el.len() * self.d_ct.len();
        if self.flip {
            2 * n
        } else {
            n
        }
    }
}

/// Image warp realizing a jitter offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Warp {
    /// Rotation by `angle` radians about the principal point.
    InPlane { angle: f64, homography: Homography },
    /// DLT estimate from projected points.
    Homography(Homography),
}

impl Warp {
    pub fn homography(&self) -> &Homography {
        match self {
            Warp::InPlane { homography, .. } | Warp::Homography(homography) => homography,
        }
    }
}

/// A sample to be jittered: object points, camera, and ground-truth pose.
///
/// The camera rotation is ignored; the pose is used in its place.
#[derive(Clone, Debug)]
pub struct Sample {
    pub points: Vec<Vector3<f64>>,
    pub camera: Camera,
    pub pose: EulerZXZ,
}

/// One augmented variant. Offsets are in degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct Jittered {
    pub d_az: f64,
    pub d_el: f64,
    pub d_ct: f64,
    pub flipped: bool,
    pub warp: Warp,
    pub target: EulerZXZ,
}

/// In-plane rotation by `angle` about the principal point: `K Rz(angle) K^-1`.
pub fn in_plane_warp(cam: &Camera, angle: f64) -> Result<Homography> {
    let k = cam.intrinsics();
    let k_inv = k
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("singular intrinsics".into()))?;
    Homography::new(k * Rotation::about_z(angle).matrix() * k_inv)
}

/// Horizontal mirror about the principal point.
pub fn flip_warp(cam: &Camera) -> Homography {
    let cx = cam.principal_point().x;
    Homography::new(Matrix3::new(-1.0, 0.0, 2.0 * cx, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)).expect("regular")
}

/// Indices of the `fraction` of points with the smallest camera depth (at
/// least 4), ordered by depth then index.
pub fn near_subset(cam: &Camera, points: &[Vector3<f64>], fraction: f64) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (cam.to_camera(p).z, i))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = ((points.len() as f64 * fraction).ceil() as usize).clamp(4.min(points.len()), points.len());
    idx.truncate(n);
    idx.into_iter().map(|(_, i)| i).collect()
}

/// Homography fitted to the near-point projections before and after a pose change.
pub fn pose_change_homography(
    cam: &Camera,
    points: &[Vector3<f64>],
    from: &EulerZXZ,
    to: &EulerZXZ,
    near_fraction: f64,
) -> Result<Homography> {
    let before = cam.with_rotation(from.to_rotation());
    let after = cam.with_rotation(to.to_rotation());
    let subset: Vec<Vector3<f64>> = near_subset(&before, points, near_fraction)
        .into_iter()
        .map(|i| points[i])
        .collect();
    let src = project(&before, &subset)?;
    let dst = project(&after, &subset)?;
    dlt_homography(&src, &dst)
}

fn offset_target(pose: &EulerZXZ, da: f64, de: f64, dc: f64) -> Result<EulerZXZ> {
    EulerZXZ::new(
        pose.az + da.to_radians(),
        pose.el + de.to_radians(),
        pose.ct + dc.to_radians(),
    )
}

/// Expands a sample over the jitter grid: `d_az` outer, `d_el` middle, `d_ct`
/// inner, then (if enabled) the mirrored copies of every variant in the same order.
pub fn jitter_sample(sample: &Sample, spec: &JitterSpec) -> Result<Vec<Jittered>> {
    spec.validate()?;
    let cam = sample.camera.with_rotation(sample.pose.to_rotation());
    let mut out = Vec::with_capacity(spec.variant_count());
    for (da, de, dc) in spec.offsets() {
        let target = offset_target(&sample.pose, da, de, dc)?;
        let warp = if da == 0.0 && de == 0.0 {
            let angle = dc.to_radians();
            Warp::InPlane {
                angle,
                homography: in_plane_warp(&cam, angle)?,
            }
        } else {
            Warp::Homography(pose_change_homography(
                &cam,
                &sample.points,
                &sample.pose,
                &target,
                spec.near_fraction,
            )?)
        };
        out.push(Jittered {
            d_az: da,
            d_el: de,
            d_ct: dc,
            flipped: false,
            warp,
            target,
        });
    }
    if spec.flip {
        let f = flip_warp(&cam);
        let mirrored: Vec<Jittered> = out
            .iter()
            .map(|j| {
                Ok(Jittered {
                    flipped: true,
                    warp: Warp::Homography(f.compose(j.warp.homography())),
                    target: flip_target(&j.target)?,
                    ..j.clone()
                })
            })
            .collect::<Result<_>>()?;
        out.extend(mirrored);
    }
    Ok(out)
}

/// Pose of the mirrored image: `(az, el, ct) -> (-az, el, -ct)`.
pub fn flip_target(e: &EulerZXZ) -> Result<EulerZXZ> {
    EulerZXZ::new(-e.az, e.el, -e.ct)
}

/// Writes manifest lines `sample_id, daz, del, dct, flipped, h00..h22, az, el, ct`
/// (angles in degrees).
pub fn write_manifest<W: Write>(mut w: W, sample_id: &str, variants: &[Jittered]) -> Result<()> {
    for j in variants {
        let (az, el, ct) = j.target.to_degrees();
        let h = j.warp.homography().to_row_major();
        let mut fields = vec![
            sample_id.to_string(),
            j.d_az.to_string(),
            j.d_el.to_string(),
            j.d_ct.to_string(),
            u8::from(j.flipped).to_string(),
        ];
        fields.extend(h.iter().map(|x| x.to_string()));
        fields.extend([az, el, ct].iter().map(|x| x.to_string()));
        writeln!(w, "{}", fields.join(", "))?;
    }
    Ok(())
}

/// Points on the surface of an axis-aligned box centred at the origin, with
/// about `per_unit` points per unit length along each face edge.
pub fn cuboid_points(half_extents: Vector3<f64>, per_unit: f64) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let nu = ((2.0 * half_extents[u] * per_unit).round() as usize).max(1);
        let nv = ((2.0 * half_extents[v] * per_unit).round() as usize).max(1);
        for side in [-1.0, 1.0] {
            for i in 0..=nu {
                for j in 0..=nv {
                    let mut p = Vector3::zeros();
                    p[axis] = side * half_extents[axis];
                    p[u] = half_extents[u] * (2.0 * i as f64 / nu as f64 - 1.0);
                    p[v] = half_extents[v] * (2.0 * j as f64 / nv as f64 - 1.0);
                    pts.push(p);
                }
            }
        }
    }
    pts
}

/// Default synthetic scene: a flat box `2 x 1.5 x 0.5` at depth 6 seen by a
/// 500 px focal camera centred at `(320, 240)`.
pub fn synthetic_sample(pose: EulerZXZ) -> Result<Sample> {
    let camera = Camera::simple(500.0, 320.0, 240.0, Rotation::identity(), Vector3::new(0.0, 0.0, 6.0))?;
    Ok(Sample {
        points: cuboid_points(Vector3::new(1.0, 0.75, 0.25), 8.0),
        camera,
        pose,
    })
}
