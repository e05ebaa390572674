//! Rotation and rigid-motion primitives on SO(3)/SE(3), homogeneous-point
//! operators, perspective projection and dual quadrics.
//!
//! Conventions used throughout the crate:
//!
//! * Poses map points from a body frame into the world frame,
//!   `x_world = R x_body + p`.
//! * Pose perturbations are applied on the right, `T exp(xi^)`.
//! * A [`Twist`] is ordered `(rho, theta)`: translation first, rotation second.
//!   The IMU pose perturbation used by the filter is ordered `(theta, p)` and
//!   is *not* a twist; see [`camera_from_imu_jacobian`].
//! * Image measurements are in normalized pixel coordinates.

use nalgebra::{Matrix3, Matrix4, Matrix4x6, Matrix6, Matrix6x4, SVector, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this rotation angle the Rodrigues forms switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-5;

/// Below this angle the cancellation-prone Rodrigues coefficients are summed
/// as series instead of evaluated in closed form.
const SERIES_COEFF_ANGLE: f64 = 0.1;

/// Orthogonality drift that triggers re-projection onto SO(3).
pub const ORTHO_DRIFT_TOL: f64 = 1e-7;

/// Default minimum depth for a point to be projected.
pub const DEFAULT_DEPTH_MIN: f64 = 1e-3;

pub type Vector6 = SVector<f64, 6>;

/// `v^`, the skew-symmetric matrix with `v^ w = v x w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]; reads the antisymmetric part.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Lift a 3-vector to homogeneous coordinates `(x, 1)`.
pub fn homogeneous(x: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(x.x, x.y, x.z, 1.0)
}

/// Gravity in the world frame used by default (z up).
pub fn default_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

// (1 - cos t) / t^2
fn coeff_one_minus_cos(t: f64) -> f64 {
    let s = (0.5 * t).sin();
    2.0 * s * s / (t * t)
}

// (t - sin t) / t^3
fn coeff_t_minus_sin(t: f64) -> f64 {
    if t < SERIES_COEFF_ANGLE {
        // sum_n (-1)^n t^(2n) / (2n+3)!
        let t2 = t * t;
        let mut term = 1.0 / 6.0;
        let mut acc = term;
        for n in 1..8 {
            let k = (2 * n + 2) as f64 * (2 * n + 3) as f64;
            term *= -t2 / k;
            acc += term;
        }
        acc
    } else {
        (t - t.sin()) / (t * t * t)
    }
}

// (2 (cos t - 1) + t^2) / (2 t^4)
fn coeff_quartic(t: f64) -> f64 {
    if t < SERIES_COEFF_ANGLE {
        // sum_n (-1)^n t^(2n) / (2n+4)!
        let t2 = t * t;
        let mut term = 1.0 / 24.0;
        let mut acc = term;
        for n in 1..8 {
            let k = (2 * n + 3) as f64 * (2 * n + 4) as f64;
            term *= -t2 / k;
            acc += term;
        }
        acc
    } else {
        let s = (0.5 * t).sin();
        (t * t - 4.0 * s * s) / (2.0 * t.powi(4))
    }
}

/// Matrix exponential of `theta^` (Rodrigues).
pub fn so3_exp(theta: &Vector3<f64>) -> Rotation {
    let t = theta.norm();
    let k = skew(theta);
    let k2 = k * k;
    let m = if t < SMALL_ANGLE {
        let t2 = t * t;
        Matrix3::identity() + k * (1.0 - t2 / 6.0) + k2 * (0.5 - t2 / 24.0)
    } else {
        Matrix3::identity() + k * (t.sin() / t) + k2 * coeff_one_minus_cos(t)
    };
    Rotation(m)
}

/// Logarithm of a rotation as an axis-angle vector with angle in `[0, pi]`.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = &r.0;
    let cos_t = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = vee(m);
    let t = w.norm().atan2(cos_t);
    if t < SMALL_ANGLE {
        // sin t ~ t (1 - t^2 / 6)
        return w * (1.0 + t * t / 6.0);
    }
    if t < std::f64::consts::PI - 1e-3 {
        return w * (t / t.sin());
    }
    // Near pi: (R + R^T)/2 - cos(t) I = (1 - cos t) a a^T.
    let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_t;
    let mut i = 0;
    for j in 1..3 {
        if b[(j, j)] > b[(i, i)] {
            i = j;
        }
    }
    let mut axis: Vector3<f64> = b.column(i).into();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * t
}

/// Left Jacobian of SO(3), `sum_n w^n / (n+1)!`.
pub fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let t = omega.norm();
    let k = skew(omega);
    let k2 = k * k;
    if t < SMALL_ANGLE {
        Matrix3::identity() + k * 0.5 + k2 / 6.0 + k2 * k / 24.0
    } else {
        Matrix3::identity() + k * coeff_one_minus_cos(t) + k2 * coeff_t_minus_sin(t)
    }
}

/// Second-order integral factor `sum_n w^n / (n+2)!`.
pub fn hl_matrix(omega: &Vector3<f64>) -> Matrix3<f64> {
    let t = omega.norm();
    let k = skew(omega);
    let k2 = k * k;
    if t < SMALL_ANGLE {
        Matrix3::identity() * 0.5 + k / 6.0 + k2 / 24.0 + k2 * k / 120.0
    } else {
        Matrix3::identity() * 0.5 + k * coeff_t_minus_sin(t) + k2 * coeff_quartic(t)
    }
}

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix, projecting it onto SO(3) if it has drifted.
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let r = Rotation(m);
        if r.orthogonality_error() > ORTHO_DRIFT_TOL || (m.determinant() - 1.0).abs() > ORTHO_DRIFT_TOL {
            Rotation(nearest_rotation(&m))
        } else {
            r
        }
    }

    /// Wraps a matrix without any check. The caller guarantees it is in SO(3).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn exp(theta: &Vector3<f64>) -> Self {
        so3_exp(theta)
    }

    pub fn log(&self) -> Vector3<f64> {
        so3_log(self)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// `R exp(theta^)`.
    pub fn perturb(&self, theta: &Vector3<f64>) -> Self {
        *self * so3_exp(theta)
    }

    /// Frobenius norm of `R^T R - I`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthogonality_error() < tol && (self.0.determinant() - 1.0).abs() < tol
    }

    /// Geodesic angle between two rotations.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        so3_log(&(self.inverse() * *other)).norm()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation::from_matrix(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Polar projection of a 3x3 matrix onto SO(3).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// A twist `(rho, theta)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub theta: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, theta: Vector3<f64>) -> Self {
        Twist { rho, theta }
    }

    pub fn from_vector(xi: &Vector6) -> Self {
        Twist { rho: xi.fixed_rows::<3>(0).into(), theta: xi.fixed_rows::<3>(3).into() }
    }

    pub fn to_vector(&self) -> Vector6 {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rho);
        v.fixed_rows_mut::<3>(3).copy_from(&self.theta);
        v
    }

    /// The 4x4 matrix `xi^ = [theta^ rho; 0 0]`.
    pub fn hat(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.theta));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.rho);
        m
    }
}

/// Rigid transform. Maps body-frame points into the parent frame.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn from_translation(p: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), p)
    }

    pub fn r(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * *x + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.r());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Pose {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let p: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into();
        Pose::new(Rotation::from_matrix(r), p)
    }

    /// `T exp(xi^)`.
    pub fn perturb(&self, xi: &Twist) -> Pose {
        se3_apply_right_perturbation(self, xi)
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(self.rotation * rhs.rotation, self.rotation * rhs.translation + self.translation)
    }
}

/// `exp(xi^)` on SE(3); the translation is `J_L(theta) rho`.
pub fn se3_exp(xi: &Twist) -> Pose {
    Pose::new(so3_exp(&xi.theta), left_jacobian(&xi.theta) * xi.rho)
}

pub fn se3_apply_right_perturbation(t: &Pose, xi: &Twist) -> Pose {
    *t * se3_exp(xi)
}

/// `p^odot` (4x6) with `xi^ p = p^odot xi` for homogeneous `p = (eps, eta)`.
pub fn odot(p: &Vector4<f64>) -> Matrix4x6<f64> {
    let eps = p.xyz();
    let mut m = Matrix4x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * p.w));
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&eps)));
    m
}

/// `p^circledcirc` (6x4) with `p^T xi^ = xi^T p^circledcirc`.
pub fn circledcirc(p: &Vector4<f64>) -> Matrix6x4<f64> {
    let eps = p.xyz();
    let mut m = Matrix6x4::zeros();
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eps);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(&eps)));
    m
}

/// Perspective division `pi(s) = s / s_3` and its 4x4 Jacobian.
pub fn perspective(s: &Vector4<f64>) -> (Vector4<f64>, Matrix4<f64>) {
    let z = s.z;
    let inv = 1.0 / z;
    let pi = s * inv;
    let mut j = Matrix4::zeros();
    j[(0, 0)] = inv;
    j[(1, 1)] = inv;
    j[(3, 3)] = inv;
    j[(0, 2)] = -s.x * inv * inv;
    j[(1, 2)] = -s.y * inv * inv;
    j[(3, 2)] = -s.w * inv * inv;
    (pi, j)
}

/// `P pi(p_cam)` with `P = [I_2 0]`, together with `d pi / d s` (4x4).
pub fn project(p_cam: &Vector4<f64>, depth_min: f64) -> Result<(Vector2<f64>, Matrix4<f64>)> {
    if !(p_cam.z > depth_min) {
        return Err(Error::NonPositiveDepth { depth: p_cam.z });
    }
    let (pi, j) = perspective(p_cam);
    Ok((Vector2::new(pi.x, pi.y), j))
}

/// A symmetric 4x4 dual quadric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualQuadric(pub Matrix4<f64>);

impl DualQuadric {
    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn is_symmetric(&self) -> bool {
        (self.0 - self.0.transpose()).norm() < 1e-9 * self.0.norm().max(1.0)
    }

    /// Plane `pi` is tangent iff `pi^T Q* pi = 0`.
    pub fn plane_residual(&self, plane: &Vector4<f64>) -> f64 {
        plane.dot(&(self.0 * plane))
    }
}

/// Origin-centered, axis-aligned ellipsoid `diag(u^2, -1)`.
pub fn dual_quadric(u_total: &Vector3<f64>) -> Result<DualQuadric> {
    if u_total.iter().any(|&u| !(u > 0.0)) {
        return Err(Error::NonPositiveSemiAxis);
    }
    Ok(DualQuadric(Matrix4::from_diagonal(&Vector4::new(
        u_total.x * u_total.x,
        u_total.y * u_total.y,
        u_total.z * u_total.z,
        -1.0,
    ))))
}

/// `T Q* T^T`.
pub fn transform_dual_quadric(t: &Pose, q: &DualQuadric) -> DualQuadric {
    let m = t.to_homogeneous();
    let out = m * q.0 * m.transpose();
    DualQuadric((out + out.transpose()) * 0.5)
}

/// Jacobian of the camera twist with respect to the IMU pose perturbation
/// `(theta, p)`, for `T_C = T_I T_extr`. Rows are ordered `(rho, theta)`.
pub fn camera_from_imu_jacobian(imu_pose: &Pose, extrinsics: &Pose) -> Matrix6<f64> {
    let re_t = extrinsics.r().transpose();
    let rc = imu_pose.r() * extrinsics.r();
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-re_t * skew(&extrinsics.translation)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&rc.transpose());
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&re_t);
    j
}

/// Apply the IMU pose perturbation `(theta, p)`: `R exp(theta^)`, `p + dp`.
pub fn perturb_imu_pose(pose: &Pose, d: &Vector6) -> Pose {
    let theta: Vector3<f64> = d.fixed_rows::<3>(0).into();
    let dp: Vector3<f64> = d.fixed_rows::<3>(3).into();
    Pose::new(pose.rotation.perturb(&theta), pose.translation + dp)
}
