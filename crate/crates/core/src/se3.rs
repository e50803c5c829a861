//! Rigid-body pose algebra, pose error metrics and random pose perturbation.
//!
//! A [`Pose`] maps camera coordinates to world coordinates: `x_w = R x_c + t`,
//! so `translation` is the camera center in the world frame. Cameras follow
//! the pinhole convention with +x right, +y down and +z along the optical axis.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotation blocks that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !ortho.is_finite() || ortho >= ROTATION_TOLERANCE {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (|RᵀR − I|_F = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() >= ROTATION_TOLERANCE {
            return Err(Error::InvalidPose(format!("det(R) = {det}, expected +1")));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Rotation3<f64>) -> Self {
        Self {
            rotation: rotation.into_inner(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle_rad: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle_rad);
        Self {
            rotation: rot.into_inner(),
            translation,
        }
    }

    /// Rotation about world z by `deg` degrees.
    pub fn rot_z_deg(deg: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), deg.to_radians(), Vector3::zeros())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("look_at: eye coincides with target"));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::invalid("look_at: viewing direction parallel to up"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Ok(Self {
            rotation,
            translation: eye,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_flat(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    /// Parses a row-major 3×4 matrix, validating the rotation block.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        let (rotation, translation) = split_flat(values)?;
        Self::new(rotation, translation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Serializes as 12 whitespace-separated values, row-major 3×4.
    pub fn to_line(&self) -> String {
        let mut s = String::with_capacity(12 * 20);
        for (i, v) in self.to_flat().iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{v}").expect("writing to a String cannot fail");
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let values = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::InvalidPose(format!("bad value {tok:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_flat(&values)
    }
}

fn split_flat(values: &[f64]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if values.len() != 12 {
        return Err(Error::InvalidPose(format!(
            "expected 12 values, found {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPose("non-finite value".into()));
    }
    let rotation = Matrix3::from_fn(|r, c| values[r * 4 + c]);
    let translation = Vector3::new(values[3], values[7], values[11]);
    Ok((rotation, translation))
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * p.translation),
    }
}

/// Per-axis bounds for random view perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBounds {
    /// Meters, per world axis.
    pub max_translation: [f64; 3],
    /// Degrees, per Euler axis (X, Y, Z).
    pub max_rotation: [f64; 3],
}

impl PerturbationBounds {
    pub fn new(max_translation: [f64; 3], max_rotation: [f64; 3]) -> Result<Self> {
        let b = Self {
            max_translation,
            max_rotation,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn zero() -> Self {
        Self {
            max_translation: [0.0; 3],
            max_rotation: [0.0; 3],
        }
    }

    /// Indoor bounds: 0.2 m and 10° per axis.
    pub fn indoor() -> Self {
        Self {
            max_translation: [0.2; 3],
            max_rotation: [10.0; 3],
        }
    }

    /// Outdoor bounds: 3.0 m and 7.5° per axis.
    pub fn outdoor() -> Self {
        Self {
            max_translation: [3.0; 3],
            max_rotation: [7.5; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.max_translation.iter().chain(self.max_rotation.iter());
        for v in all {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::invalid(format!(
                    "perturbation bounds must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn symmetric_uniform<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.gen_range(-bound..=bound)
    }
}

/// Euler rotation composed in X, Y, Z order: `Rx(x) · Ry(y) · Rz(z)` (radians).
pub fn euler_xyz(x: f64, y: f64, z: f64) -> Matrix3<f64> {
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), x);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), y);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), z);
    (rx * ry * rz).into_inner()
}

/// Recovers `(x, y, z)` such that `m = Rx(x) · Ry(y) · Rz(z)`, for |y| < 90°.
pub fn euler_xyz_angles(m: &Matrix3<f64>) -> [f64; 3] {
    let y = m[(0, 2)].clamp(-1.0, 1.0).asin();
    let x = (-m[(1, 2)]).atan2(m[(2, 2)]);
    let z = (-m[(0, 1)]).atan2(m[(0, 0)]);
    [x, y, z]
}

/// Uniform per-axis translation offsets in the world frame plus uniform
/// per-axis Euler angles applied in the camera frame (`R' = R · Rxyz`).
pub fn perturb(p: &Pose, bounds: &PerturbationBounds, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_with(p, bounds, &mut rng)
}

pub fn perturb_with<R: Rng>(p: &Pose, bounds: &PerturbationBounds, rng: &mut R) -> Pose {
    let dt = Vector3::from_fn(|k, _| symmetric_uniform(rng, bounds.max_translation[k]));
    let angles: [f64; 3] =
        std::array::from_fn(|k| symmetric_uniform(rng, bounds.max_rotation[k]).to_radians());
    let delta = euler_xyz(angles[0], angles[1], angles[2]);
    Pose {
        rotation: p.rotation * delta,
        translation: p.translation + dt,
    }
}

/// Euclidean distance between camera centers, meters.
pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// Angle of the relative rotation `R_aᵀ R_b`, degrees in `[0, 180]`.
///
/// Computed as `atan2(|axis|, cos)` which equals
/// `acos(clamp((tr − 1) / 2))` but stays accurate near 0° and 180°.
pub fn rotation_error(a: &Pose, b: &Pose) -> f64 {
    let rel = a.rotation.transpose() * b.rotation;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (axis.norm() / 2.0).clamp(0.0, 1.0);
    sin.atan2(cos).to_degrees()
}

/// Projects a raw row-major 3×4 regressor output onto SE(3): the rotation
/// block is replaced by its nearest rotation (polar decomposition with
/// the determinant forced to +1), the translation is copied verbatim.
pub fn orthonormalize(raw: &[f64]) -> Result<Pose> {
    let (m, translation) = split_flat(raw)?;
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::NonRecoverableRotation),
    };
    let sv = svd.singular_values;
    let max = sv.max();
    let (min_idx, min) = sv.argmin();
    if !(max > 0.0) || min <= max * 1e-10 {
        return Err(Error::NonRecoverableRotation);
    }
    let mut u = u;
    if (u * v_t).determinant() < 0.0 {
        let mut col = u.column_mut(min_idx);
        col *= -1.0;
    }
    Ok(Pose {
        rotation: u * v_t,
        translation,
    })
}

/// Re-centers a pose set so the centroid of camera centers sits at the
/// origin. Returns the re-centered poses and the applied transform.
pub fn recenter(poses: &[Pose]) -> Result<(Vec<Pose>, Pose)> {
    if poses.is_empty() {
        return Err(Error::invalid("recenter: empty pose list"));
    }
    let centroid = poses.iter().map(|p| p.translation).sum::<Vector3<f64>>() / poses.len() as f64;
    let g = Pose::from_translation(-centroid);
    Ok((poses.iter().map(|p| compose(&g, p)).collect(), g))
}

/// Writes one pose per line.
pub fn write_poses<W: Write>(mut w: W, poses: &[Pose]) -> Result<()> {
    for p in poses {
        writeln!(w, "{}", p.to_line())?;
    }
    Ok(())
}

pub fn read_poses<R: BufRead>(r: R) -> Result<Vec<Pose>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Pose::parse_line(&line).map_err(|e| Error::Parse {
            path: "<poses>".into(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
