//! Rigid-transform algebra.
//!
//! Conventions used throughout the crate:
//!
//! * Roll-pitch-yaw is extrinsic x-y-z: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
//! * `a.compose(&b)` is the matrix product `a * b` (apply `b` first).
//! * Camera frames are x right, y down, z along the optical axis.
//! * Serialized poses are 12 numbers: the rotation row-major, then the
//!   translation.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ORTHO_DRIFT: f64 = 1e-9;
const GIMBAL_EPS: f64 = 1e-6;

/// An element of SE(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 12]", into = "[f64; 12]")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Matrix3::identity(), Vector3::new(x, y, z))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_rotation(rot_x(angle))
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_rotation(rot_y(angle))
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_rotation(rot_z(angle))
    }

    /// `self * other`: `other` is applied first. The result is
    /// re-orthonormalized if rounding drift exceeds 1e-9.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut out = RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if orthonormality_error(&out.rotation) > ORTHO_DRIFT {
            out.rotation = orthonormalize(&out.rotation);
        }
        out
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Rotation part only.
    pub fn rotation_only(&self) -> Self {
        Self::from_rotation(self.rotation)
    }

    pub fn is_pure_rotation(&self, tol: f64) -> bool {
        self.translation.norm() < tol
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Row-major rotation followed by translation.
    pub fn to_flat(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_flat(v: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]),
            translation: Vector3::new(v[9], v[10], v[11]),
        }
    }

    /// Parses 12 numbers separated by commas and/or whitespace.
    pub fn parse_flat(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("pose value {t:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let arr: [f64; 12] = vals.as_slice().try_into().map_err(|_| {
            Error::InvalidConfig(format!("pose needs 12 numbers, got {}", vals.len()))
        })?;
        Ok(Self::from_flat(&arr))
    }

    /// Max elementwise distance between the two transforms' 12 numbers.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl From<[f64; 12]> for RigidTransform {
    fn from(v: [f64; 12]) -> Self {
        Self::from_flat(&v)
    }
}

impl From<RigidTransform> for [f64; 12] {
    fn from(t: RigidTransform) -> Self {
        t.to_flat()
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `max |R^T R - I|` elementwise.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Nearest rotation matrix (polar decomposition via SVD).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * vt;
    }
    out
}

/// Rotation angle of a rotation matrix in `[0, pi]`, accurate near both ends.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let w = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    // sin from the antisymmetric part, cos from the trace
    (0.5 * w.norm()).atan2(0.5 * (r.trace() - 1.0))
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// A 6-DoF relative camera pose `(x, y, z, roll, pitch, yaw)` in meters and
/// radians. Angles are kept in `(-pi, pi]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct ActionTuple {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ActionTuple {
    pub fn new(x: f64, y: f64, z: f64, alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            x,
            y,
            z,
            alpha: normalize_angle(alpha),
            beta: normalize_angle(beta),
            gamma: normalize_angle(gamma),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.alpha, self.beta, self.gamma]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_transform(&self) -> RigidTransform {
        action_to_transform(self)
    }

    pub fn max_position(&self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn max_rotation(&self) -> f64 {
        self.alpha.abs().max(self.beta.abs()).max(self.gamma.abs())
    }
}

impl From<[f64; 6]> for ActionTuple {
    fn from(a: [f64; 6]) -> Self {
        Self::from_array(a)
    }
}

impl From<ActionTuple> for [f64; 6] {
    fn from(a: ActionTuple) -> Self {
        a.to_array()
    }
}

pub fn rpy_matrix(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    rot_z(yaw) * rot_y(pitch) * rot_x(roll)
}

pub fn action_to_transform(a: &ActionTuple) -> RigidTransform {
    RigidTransform::new(
        rpy_matrix(a.alpha, a.beta, a.gamma),
        Vector3::new(a.x, a.y, a.z),
    )
}

/// Inverse of [`action_to_transform`]. Refuses to choose a branch at the
/// pitch singularity.
pub fn transform_to_action(t: &RigidTransform) -> Result<ActionTuple> {
    let r = &t.rotation;
    let r20 = r[(2, 0)];
    if (r20.abs() - 1.0).abs() <= GIMBAL_EPS {
        return Err(Error::GimbalLock(r20.abs()));
    }
    let beta = (-r20).atan2((r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt());
    let alpha = r[(2, 1)].atan2(r[(2, 2)]);
    let gamma = r[(1, 0)].atan2(r[(0, 0)]);
    Ok(ActionTuple::new(
        t.translation.x,
        t.translation.y,
        t.translation.z,
        alpha,
        beta,
        gamma,
    ))
}

/// The four front/back camera-frame transforms for a camera rotation `t`.
///
/// `fb` maps a destination front ray into the source back frame, `bf` a
/// destination back ray into the source front frame. `lens` is the
/// front-to-back transform and is assumed self-inverse (a half-turn).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePatterns {
    pub ff: RigidTransform,
    pub fb: RigidTransform,
    pub bf: RigidTransform,
    pub bb: RigidTransform,
}

pub fn frame_patterns(t: &RigidTransform, lens: &RigidTransform) -> FramePatterns {
    FramePatterns {
        ff: *t,
        fb: lens.compose(t),
        bf: t.compose(lens),
        bb: lens.compose(t).compose(lens),
    }
}

/// Default front-to-back lens transform: half-turn about the camera y axis.
pub fn default_lens_transform() -> RigidTransform {
    RigidTransform::rot_y(PI)
}

/// Lifts a robot-base-frame action into the camera frame of a virtually
/// rotated camera: `T^-1 * Tc^-1 * Tad * Tc * T`.
pub fn expand_action(
    t_ad: &RigidTransform,
    t_c: &RigidTransform,
    t: &RigidTransform,
) -> RigidTransform {
    t.inverse()
        .compose(&t_c.inverse())
        .compose(t_ad)
        .compose(t_c)
        .compose(t)
}

/// Relative pose of a wheeled robot after driving at `(v, omega)` for `dt`
/// seconds on a circular arc in the x-y plane.
pub fn unicycle_delta(v: f64, omega: f64, dt: f64) -> RigidTransform {
    debug_assert!(dt > 0.0);
    let heading = omega * dt;
    let (x, y) = if omega.abs() > 1e-9 {
        (v / omega * heading.sin(), v / omega * (1.0 - heading.cos()))
    } else {
        (v * dt, 0.0)
    };
    RigidTransform::new(rot_z(heading), Vector3::new(x, y, 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum RotationMode {
    /// Haar-uniform over SO(3).
    UniformSo3,
    /// Independent uniform roll, pitch, yaw in the given `[lo, hi]` ranges.
    BoundedRpy { bounds: [[f64; 2]; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationSamplerConfig {
    pub mode: RotationMode,
    pub seed: u64,
}

impl RotationSamplerConfig {
    pub fn uniform(seed: u64) -> Self {
        Self {
            mode: RotationMode::UniformSo3,
            seed,
        }
    }

    pub fn bounded(bounds: [[f64; 2]; 3], seed: u64) -> Self {
        Self {
            mode: RotationMode::BoundedRpy { bounds },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let RotationMode::BoundedRpy { bounds } = &self.mode {
            for [lo, hi] in bounds {
                if !(lo.is_finite() && hi.is_finite()) || lo > hi || *lo <= -PI || *hi > PI {
                    return Err(Error::InvalidConfig(format!(
                        "rpy bound [{lo}, {hi}] must satisfy -pi < lo <= hi <= pi"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Seeded source of random camera rotations.
#[derive(Clone, Debug)]
pub struct RotationSampler {
    mode: RotationMode,
    rng: ChaCha8Rng,
}

impl RotationSampler {
    pub fn new(cfg: &RotationSamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::with_rng(cfg.mode, crate::rng::stream(cfg.seed, &[])))
    }

    pub fn with_rng(mode: RotationMode, rng: ChaCha8Rng) -> Self {
        Self { mode, rng }
    }

    pub fn sample(&mut self) -> RigidTransform {
        sample_rotation_with(&self.mode, &mut self.rng)
    }

    pub fn mode(&self) -> &RotationMode {
        &self.mode
    }

    /// The underlying stream, for other draws that must follow the same seed.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Draws one rotation. Uniform mode uses Shoemake's uniform unit quaternion.
pub fn sample_rotation_with<R: Rng + ?Sized>(mode: &RotationMode, rng: &mut R) -> RigidTransform {
    match mode {
        RotationMode::UniformSo3 => {
            let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
            let (t2, t3) = (2.0 * PI * u2, 2.0 * PI * u3);
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                b * t3.cos(),
                a * t2.sin(),
                a * t2.cos(),
                b * t3.sin(),
            ));
            RigidTransform::from_rotation(*q.to_rotation_matrix().matrix())
        }
        RotationMode::BoundedRpy { bounds } => {
            let mut draw = |[lo, hi]: [f64; 2]| {
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            };
            let roll = draw(bounds[0]);
            let pitch = draw(bounds[1]);
            let yaw = draw(bounds[2]);
            RigidTransform::from_rotation(rpy_matrix(roll, pitch, yaw))
        }
    }
}

/// Convenience wrapper: a fresh sampler from `cfg`, one draw.
pub fn sample_rotation(cfg: &RotationSamplerConfig) -> Result<RigidTransform> {
    Ok(RotationSampler::new(cfg)?.sample())
}
