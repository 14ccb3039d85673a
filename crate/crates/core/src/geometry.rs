//! Rigid-body algebra on SE(3).
//!
//! Poses are stored as a rotation matrix plus a translation in meters. The
//! tangent space uses the `(translation | rotation)` ordering so that a
//! diagonal weight `diag(w_t, w_t, w_t, w_r, w_r, w_r)` lines up with the
//! first and last three twist coordinates.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Orthonormality tolerance for anything accepted as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Angles closer than this to π have no principal logarithm here.
pub const NEAR_PI_MARGIN: f64 = 1e-6;
const SMALL_ANGLE: f64 = 1e-6;
/// Below this angle the cancelling `V` coefficients use their power series.
const SERIES_ANGLE: f64 = 0.1;
const DEGENERATE_NORM: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate 6D rotation: columns parallel or near zero")]
    DegenerateInput,
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    NotARotation(f64),
    #[error("rotation angle {0} is within {NEAR_PI_MARGIN:e} of pi; logarithm is not defined on the principal branch")]
    NearPiRotation(f64),
    #[error("interpolation parameter {0} outside [0, 1]")]
    ParameterOutOfRange(f64),
    #[error("weights must be nonnegative and not both zero (w_t = {0}, w_r = {1})")]
    InvalidWeights(f64, f64),
    #[error("expected {expected} bytes, got {actual}")]
    ShortBuffer { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Rigid transform: `x ↦ R x + t`.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation;
        let (axis, angle) = axis_angle(&self.rotation);
        write!(
            f,
            "Pose(t = [{:.5}, {:.5}, {:.5}], angle = {:.5} about [{:.3}, {:.3}, {:.3}])",
            t.x, t.y, t.z, angle, axis.x, axis.y, axis.z
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Returns the largest absolute entry of `RᵀR − I`, and `det R`.
fn orthonormality(r: &Matrix3<f64>) -> (f64, f64) {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    (err, r.determinant())
}

pub fn is_rotation(r: &Matrix3<f64>) -> bool {
    let (err, det) = orthonormality(r);
    err <= ROTATION_TOLERANCE && (det - 1.0).abs() <= ROTATION_TOLERANCE
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rotation angle in [0, π].
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

fn axis_angle(r: &Matrix3<f64>) -> (Vector3<f64>, f64) {
    let angle = rotation_angle(r);
    let v = vee(&(r - r.transpose()));
    let n = v.norm();
    if n < 1e-12 {
        (Vector3::z(), angle)
    } else {
        (v / n, angle)
    }
}

/// Geodesic angle between two rotations.
pub fn rotation_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

/// Rodrigues' formula: exp of `[ω]×`.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, half_versine_ratio(theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// `(1 − cos θ) / θ²` without cancellation.
fn half_versine_ratio(theta: f64) -> f64 {
    let s = (0.5 * theta).sin();
    2.0 * s * s / (theta * theta)
}

/// Principal logarithm of a rotation, rejecting angles near π.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let v = vee(&(r - r.transpose()));
    let s = 0.5 * v.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta > PI - NEAR_PI_MARGIN {
        return Err(GeometryError::NearPiRotation(theta));
    }
    if theta < SMALL_ANGLE {
        // θ / (2 sin θ) → 1/2 + θ²/12
        Ok(v * (0.5 + theta * theta / 12.0))
    } else {
        Ok(v * (theta / (2.0 * theta.sin())))
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates the rotation block against [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let (err, det) = orthonormality(&rotation);
        if err > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::NotARotation(err.max((det - 1.0).abs())));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Skips validation. Callers guarantee `rotation` is orthonormal.
    pub fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let n = axis.norm();
        let omega = if n > 0.0 { axis * (angle / n) } else { Vector3::zeros() };
        Pose {
            rotation: so3_exp(&omega),
            translation,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn set_translation(&mut self, t: Vector3<f64>) {
        self.translation = t;
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Column `i` of the rotation: the pose's local axis expressed in the parent frame.
    pub fn axis(&self, i: usize) -> Vector3<f64> {
        self.rotation.column(i).into_owned()
    }

    /// Projects the rotation back onto SO(3) by Gram–Schmidt on its first two columns.
    pub fn renormalized(&self) -> Pose {
        let r6 = matrix_to_rot6d_unchecked(&self.rotation);
        let rotation = rot6d_to_matrix(&r6).unwrap_or(self.rotation);
        Pose {
            rotation,
            translation: self.translation,
        }
    }

    /// Translation followed by the 6D rotation representation.
    pub fn to_vec9(&self) -> [f64; 9] {
        let r = matrix_to_rot6d_unchecked(&self.rotation);
        let t = self.translation;
        [t.x, t.y, t.z, r.0[0], r.0[1], r.0[2], r.0[3], r.0[4], r.0[5]]
    }

    pub fn from_vec9(v: &[f64]) -> Result<Pose> {
        assert!(v.len() >= 9, "pose vector needs 9 entries");
        let r6 = Rot6D([v[3], v[4], v[5], v[6], v[7], v[8]]);
        Ok(Pose {
            rotation: rot6d_to_matrix(&r6)?,
            translation: Vector3::new(v[0], v[1], v[2]),
        })
    }

    /// 12 little-endian f64: row-major rotation, then translation.
    pub fn to_bytes(&self) -> [u8; POSE_BYTES] {
        let mut out = [0u8; POSE_BYTES];
        let mut i = 0;
        for r in 0..3 {
            for c in 0..3 {
                out[i..i + 8].copy_from_slice(&self.rotation[(r, c)].to_le_bytes());
                i += 8;
            }
        }
        for k in 0..3 {
            out[i..i + 8].copy_from_slice(&self.translation[k].to_le_bytes());
            i += 8;
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Pose> {
        if bytes.len() < POSE_BYTES {
            return Err(GeometryError::ShortBuffer {
                expected: POSE_BYTES,
                actual: bytes.len(),
            });
        }
        let f = |i: usize| f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        let rotation = Matrix3::new(f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8));
        Pose::new(rotation, Vector3::new(f(9), f(10), f(11)))
    }
}

pub const POSE_BYTES: usize = 96;

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Element of se(3), ordered `(ρ | ω)`: translational part first, rotational part last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(rho: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Twist(Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn translational(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn rotational(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }
}

/// Weights of the diagonal metric `W = diag(w_t·I₃, w_r·I₃)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceWeights {
    w_t: f64,
    w_r: f64,
}

impl DistanceWeights {
    pub fn new(w_t: f64, w_r: f64) -> Result<Self> {
        let valid = w_t.is_finite() && w_r.is_finite() && w_t >= 0.0 && w_r >= 0.0;
        if !valid || (w_t == 0.0 && w_r == 0.0) {
            return Err(GeometryError::InvalidWeights(w_t, w_r));
        }
        Ok(DistanceWeights { w_t, w_r })
    }

    pub fn w_t(&self) -> f64 {
        self.w_t
    }

    pub fn w_r(&self) -> f64 {
        self.w_r
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        DistanceWeights::new(self.w_t * c, self.w_r * c)
    }

    pub fn quadratic_form(&self, xi: &Twist) -> f64 {
        self.w_t * xi.translational().norm_squared() + self.w_r * xi.rotational().norm_squared()
    }
}

impl Default for DistanceWeights {
    /// `w_t = 100`, `w_r = 20`.
    fn default() -> Self {
        DistanceWeights {
            w_t: 100.0,
            w_r: 20.0,
        }
    }
}

/// First two columns of a rotation matrix, concatenated, before orthonormalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    fn columns(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = &self.0;
        (Vector3::new(r[0], r[1], r[2]), Vector3::new(r[3], r[4], r[5]))
    }
}

/// Gram–Schmidt on the two columns; the third column is their cross product.
pub fn rot6d_to_matrix(r: &Rot6D) -> Result<Matrix3<f64>> {
    let (a, b) = r.columns();
    let an = a.norm();
    if !(an > DEGENERATE_NORM) || !(b.norm() > DEGENERATE_NORM) {
        return Err(GeometryError::DegenerateInput);
    }
    let e1 = a / an;
    let b_perp = b - e1 * e1.dot(&b);
    let bn = b_perp.norm();
    if !(bn > DEGENERATE_NORM * b.norm().max(1.0)) {
        return Err(GeometryError::DegenerateInput);
    }
    let e2 = b_perp / bn;
    let e3 = e1.cross(&e2);
    Ok(Matrix3::from_columns(&[e1, e2, e3]))
}

pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> Result<Rot6D> {
    let (err, det) = orthonormality(r);
    if err > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(GeometryError::NotARotation(err.max((det - 1.0).abs())));
    }
    Ok(matrix_to_rot6d_unchecked(r))
}

fn matrix_to_rot6d_unchecked(r: &Matrix3<f64>) -> Rot6D {
    Rot6D([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ])
}

/// Logarithm on the principal branch: closed-form `V⁻¹` with a Taylor
/// fallback for tiny angles.
pub fn se3_log(t: &Pose) -> Result<Twist> {
    let omega = so3_log(&t.rotation)?;
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(&omega);
    // V⁻¹ = I − ½K + c·K², c → 1/12 as θ → 0
    let c = if theta < SERIES_ANGLE {
        1.0 / 12.0 + theta2 * (1.0 / 720.0 + theta2 * (1.0 / 30240.0 + theta2 / 1209600.0))
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * c;
    Ok(Twist::new(v_inv * t.translation, omega))
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let rho = xi.translational();
    let omega = xi.rotational();
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(&omega);
    let b = if theta < SMALL_ANGLE {
        0.5 - theta2 / 24.0
    } else {
        half_versine_ratio(theta)
    };
    let c = if theta < SERIES_ANGLE {
        1.0 / 6.0 - theta2 * (1.0 / 120.0 - theta2 * (1.0 / 5040.0 - theta2 / 362880.0))
    } else {
        (theta - theta.sin()) / (theta2 * theta)
    };
    let v = Matrix3::identity() + k * b + k * k * c;
    Pose {
        rotation: so3_exp(&omega),
        translation: v * rho,
    }
}

/// `ξ = log(P⁻¹ G)`: the twist carrying `from` onto `to`, in `from`'s frame.
pub fn relative_twist(from: &Pose, to: &Pose) -> Result<Twist> {
    se3_log(&from.inverse().compose(to))
}

/// Weighted geodesic pseudo-metric `√(ξᵀ W ξ)` with `ξ = log(P⁻¹ G)`.
pub fn weighted_distance(p: &Pose, g: &Pose, w: &DistanceWeights) -> Result<f64> {
    let xi = relative_twist(p, g)?;
    Ok(w.quadratic_form(&xi).sqrt())
}

fn slerp_quaternion(q0: &Quaternion<f64>, q1: &Quaternion<f64>, t: f64) -> Quaternion<f64> {
    let mut dot = q0.dot(q1);
    let mut q1 = *q1;
    if dot < 0.0 {
        q1 = -q1;
        dot = -dot;
    }
    if dot > 1.0 - 1e-12 {
        let q = q0 * (1.0 - t) + q1 * t;
        return q / q.norm();
    }
    let omega = dot.min(1.0).acos();
    let s = omega.sin();
    let a = ((1.0 - t) * omega).sin() / s;
    let b = (t * omega).sin() / s;
    q0 * a + q1 * b
}

/// SLERP on the shortest quaternion arc for rotation, linear in translation.
pub fn interpolate_pose(p0: &Pose, p1: &Pose, t: f64) -> Result<Pose> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GeometryError::ParameterOutOfRange(t));
    }
    if t == 0.0 {
        return Ok(*p0);
    }
    if t == 1.0 {
        return Ok(*p1);
    }
    let q0 = p0.quaternion().into_inner();
    let q1 = p1.quaternion().into_inner();
    let q = UnitQuaternion::new_normalize(slerp_quaternion(&q0, &q1, t));
    let translation = p0.translation * (1.0 - t) + p1.translation * t;
    Ok(Pose::from_quaternion(&q, translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rz(angle: f64) -> Matrix3<f64> {
        so3_exp(&Vector3::new(0.0, 0.0, angle))
    }

    #[test]
    fn rot6d_identity_and_scaled_columns() {
        let id = rot6d_to_matrix(&Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_relative_eq!(id, Matrix3::identity(), epsilon = 1e-15);
        let id = rot6d_to_matrix(&Rot6D([2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert_relative_eq!(id, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn rot6d_degenerate_inputs() {
        assert_eq!(
            rot6d_to_matrix(&Rot6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])),
            Err(GeometryError::DegenerateInput)
        );
        assert_eq!(
            rot6d_to_matrix(&Rot6D([0.0, 0.0, 0.0, 0.0, 1.0, 0.0])),
            Err(GeometryError::DegenerateInput)
        );
        assert!(rot6d_to_matrix(&Rot6D([f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0])).is_err());
    }

    #[test]
    fn matrix_to_rot6d_reads_columns() {
        let r = matrix_to_rot6d(&Matrix3::identity()).unwrap();
        assert_eq!(r.0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let r = matrix_to_rot6d(&rz(PI / 2.0)).unwrap();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in r.0.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let bad = Matrix3::identity() * 1.01;
        assert!(matches!(matrix_to_rot6d(&bad), Err(GeometryError::NotARotation(_))));
    }

    #[test]
    fn log_of_simple_poses() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Twist::zero());
        let xi = se3_log(&Pose::from_translation(Vector3::new(0.1, 0.0, 0.0))).unwrap();
        assert_relative_eq!(xi.0, Vector6::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn exp_of_simple_twists() {
        assert_eq!(se3_exp(&Twist::zero()), Pose::identity());
        let p = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI / 2.0)));
        assert_relative_eq!(*p.rotation(), rz(PI / 2.0), epsilon = 1e-15);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*p.rotation(), expected, epsilon = 1e-15);
    }

    #[test]
    fn near_pi_is_rejected() {
        let p = Pose::from_parts_unchecked(rz(PI), Vector3::zeros());
        assert!(matches!(se3_log(&p), Err(GeometryError::NearPiRotation(_))));
        let p = Pose::from_parts_unchecked(rz(PI - 1e-3), Vector3::zeros());
        assert!(se3_log(&p).is_ok());
    }

    #[test]
    fn distance_examples() {
        let w = DistanceWeights::default();
        let id = Pose::identity();
        assert_eq!(weighted_distance(&id, &id, &w).unwrap(), 0.0);
        let t = Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        assert_relative_eq!(weighted_distance(&id, &t, &w).unwrap(), 1.0, epsilon = 1e-12);
        let r = Pose::from_parts_unchecked(rz(PI / 2.0), Vector3::zeros());
        let d = weighted_distance(&id, &r, &w).unwrap();
        assert_relative_eq!(d, PI / 2.0 * 20f64.sqrt(), epsilon = 1e-12);
        assert!((d - 7.0248).abs() < 1e-4);
    }

    #[test]
    fn weights_validation() {
        assert!(DistanceWeights::new(0.0, 0.0).is_err());
        assert!(DistanceWeights::new(-1.0, 2.0).is_err());
        assert!(DistanceWeights::new(0.0, 2.0).is_ok());
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let p0 = Pose::identity();
        let p1 = Pose::from_parts_unchecked(rz(PI / 2.0), Vector3::new(0.2, 0.0, 0.4));
        assert_eq!(interpolate_pose(&p0, &p1, 0.0).unwrap(), p0);
        assert_eq!(interpolate_pose(&p0, &p1, 1.0).unwrap(), p1);
        let mid = interpolate_pose(&p0, &p1, 0.5).unwrap();
        assert_relative_eq!(*mid.rotation(), rz(PI / 4.0), epsilon = 1e-12);
        assert_relative_eq!(*mid.translation(), Vector3::new(0.1, 0.0, 0.2), epsilon = 1e-15);
        assert!(interpolate_pose(&p0, &p1, 1.5).is_err());
    }

    #[test]
    fn pose_bytes_layout() {
        let p = Pose::from_parts_unchecked(rz(0.3), Vector3::new(1.0, 2.0, 3.0));
        let b = p.to_bytes();
        assert_eq!(&b[8..16], &p.rotation()[(0, 1)].to_le_bytes());
        assert_eq!(&b[72..80], &1.0f64.to_le_bytes());
        assert_eq!(Pose::from_bytes(&b).unwrap(), p);
        assert!(Pose::from_bytes(&b[..50]).is_err());
    }
}
