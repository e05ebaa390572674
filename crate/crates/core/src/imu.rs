//! Closed-form IMU propagation: mean, transition matrix, and the covariance
//! of the full sliding-window state.
//!
//! The IMU error state is ordered `(theta, v, p, b_g, b_a)` (15 entries). The
//! window follows as `W` blocks of `(theta, p)`, newest first.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{default_gravity, hl_matrix, left_jacobian, skew, so3_exp, Pose, Rotation};

pub const IMU_DIM: usize = 15;
pub const POSE_DIM: usize = 6;

pub const THETA: usize = 0;
pub const VEL: usize = 3;
pub const POS: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;

/// Below this value of `|w| tau` the transition matrix uses series limits.
pub const PHI_SERIES_THRESHOLD: f64 = 2e-2;

pub type Matrix15 = SMatrix<f64, 15, 15>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    pub rotation: Rotation,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
}

impl Default for ImuState {
    fn default() -> Self {
        ImuState {
            rotation: Rotation::identity(),
            velocity: Vector3::zeros(),
            position: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            bias_accel: Vector3::zeros(),
        }
    }
}

impl ImuState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }

    /// Retract an error-state increment `(theta, v, p, b_g, b_a)`.
    pub fn oplus(&self, dx: &[f64]) -> ImuState {
        let at = |i: usize| Vector3::new(dx[i], dx[i + 1], dx[i + 2]);
        ImuState {
            rotation: self.rotation.perturb(&at(THETA)),
            velocity: self.velocity + at(VEL),
            position: self.position + at(POS),
            bias_gyro: self.bias_gyro + at(BG),
            bias_accel: self.bias_accel + at(BA),
        }
    }
}

/// Square roots of the continuous-time noise power spectral densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuNoiseParams {
    /// Gyroscope white noise, rad/s/sqrt(Hz).
    pub sigma_gyro: f64,
    /// Accelerometer white noise, m/s^2/sqrt(Hz).
    pub sigma_accel: f64,
    /// Gyroscope bias random walk, rad/s^2/sqrt(Hz).
    pub sigma_gyro_bias: f64,
    /// Accelerometer bias random walk, m/s^3/sqrt(Hz).
    pub sigma_accel_bias: f64,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        ImuNoiseParams { sigma_gyro: 1.7e-4, sigma_accel: 2.0e-3, sigma_gyro_bias: 1.9e-5, sigma_accel_bias: 3.0e-3 }
    }
}

impl ImuNoiseParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_gyro, self.sigma_accel, self.sigma_gyro_bias, self.sigma_accel_bias];
        if all.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidInput("IMU noise densities must be positive".into()))
        }
    }

    /// Like [`validate`](Self::validate) but accepts zero densities, for
    /// noiseless simulation.
    pub fn validate_allow_zero(&self) -> Result<()> {
        let all = [self.sigma_gyro, self.sigma_accel, self.sigma_gyro_bias, self.sigma_accel_bias];
        if all.iter().all(|s| s.is_finite() && *s >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidInput("IMU noise densities must be non-negative".into()))
        }
    }

    /// `Q = diag(s_w^2 I, s_a^2 I, 0, s_g^2 I, s_ba^2 I)`.
    pub fn q_matrix(&self) -> Matrix15 {
        let mut q = Matrix15::zeros();
        for i in 0..3 {
            q[(THETA + i, THETA + i)] = self.sigma_gyro.powi(2);
            q[(VEL + i, VEL + i)] = self.sigma_accel.powi(2);
            q[(BG + i, BG + i)] = self.sigma_gyro_bias.powi(2);
            q[(BA + i, BA + i)] = self.sigma_accel_bias.powi(2);
        }
        q
    }
}

/// One inertial reading held constant over `[t, t + dt)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InertialSample {
    pub omega: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub dt: f64,
}

impl InertialSample {
    pub fn new(omega: Vector3<f64>, accel: Vector3<f64>, dt: f64) -> Self {
        InertialSample { omega, accel, dt }
    }

    pub fn validate(&self, max_dt: f64) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= max_dt) {
            return Err(Error::InvalidInput(format!("sample dt {} outside (0, {max_dt}]", self.dt)));
        }
        if !(self.omega.iter().chain(self.accel.iter()).all(|x| x.is_finite())) {
            return Err(Error::InvalidInput("non-finite inertial sample".into()));
        }
        Ok(())
    }
}

/// Which pose is cloned into the window on augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowInsertion {
    /// The pose before the propagation step (`B` selects the prior errors).
    #[default]
    Prior,
    /// The pose after the propagation step (`B` takes the `Phi` rows).
    Propagated,
}

/// A window slot: the cloned IMU pose and the camera frame it belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSlot {
    pub frame: Option<u64>,
    pub time: f64,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub time: f64,
    pub imu: ImuState,
    /// Newest first, exactly `W` entries.
    pub window: Vec<WindowSlot>,
    pub covariance: DMatrix<f64>,
    pub gravity: Vector3<f64>,
    pub extrinsics: Pose,
}

impl FilterState {
    /// Fills the window with copies of the initial pose. The copies are fully
    /// correlated with the IMU pose so they carry no spurious information.
    pub fn new(time: f64, imu: ImuState, imu_cov: &Matrix15, window_len: usize, extrinsics: Pose) -> Self {
        let n = IMU_DIM + POSE_DIM * window_len;
        let mut a = DMatrix::zeros(n, IMU_DIM);
        for i in 0..IMU_DIM {
            a[(i, i)] = 1.0;
        }
        for k in 0..window_len {
            for i in 0..3 {
                a[(IMU_DIM + POSE_DIM * k + i, THETA + i)] = 1.0;
                a[(IMU_DIM + POSE_DIM * k + 3 + i, POS + i)] = 1.0;
            }
        }
        let sigma = DMatrix::from_column_slice(IMU_DIM, IMU_DIM, imu_cov.as_slice());
        let covariance = &a * sigma * a.transpose();
        let slot = WindowSlot { frame: None, time, pose: imu.pose() };
        FilterState { time, imu, window: vec![slot; window_len], covariance, gravity: default_gravity(), extrinsics }
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn dim(&self) -> usize {
        IMU_DIM + POSE_DIM * self.window.len()
    }

    /// Column offset of window slot `k` (0 = newest).
    pub fn slot_offset(k: usize) -> usize {
        IMU_DIM + POSE_DIM * k
    }

    pub fn slot_of_frame(&self, frame: u64) -> Option<usize> {
        self.window.iter().position(|s| s.frame == Some(frame))
    }

    /// Camera pose for window slot `k`.
    pub fn camera_pose(&self, k: usize) -> Pose {
        self.window[k].pose * self.extrinsics
    }

    pub fn imu_covariance(&self) -> Matrix15 {
        Matrix15::from_fn(|i, j| self.covariance[(i, j)])
    }

    pub fn symmetrize(&mut self) {
        let t = self.covariance.transpose();
        self.covariance = (&self.covariance + t) * 0.5;
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.covariance.clone().symmetric_eigenvalues().min()
    }

    pub fn check_psd(&self, tol: f64) -> Result<()> {
        let m = self.min_eigenvalue();
        if m < -tol {
            Err(Error::CovarianceNotPsd { min_eigenvalue: m })
        } else {
            Ok(())
        }
    }
}

/// Closed-form integration of the nominal dynamics over one sample.
pub fn propagate_mean(state: &ImuState, z: &InertialSample, g: &Vector3<f64>) -> ImuState {
    let tau = z.dt;
    let w = z.omega - state.bias_gyro;
    let a = z.accel - state.bias_accel;
    let tw = w * tau;
    let r = state.rotation.matrix();
    ImuState {
        rotation: state.rotation * so3_exp(&tw),
        velocity: state.velocity + g * tau + r * left_jacobian(&tw) * a * tau,
        position: state.position + state.velocity * tau + g * (0.5 * tau * tau) + r * hl_matrix(&tw) * a * (tau * tau),
        bias_gyro: state.bias_gyro,
        bias_accel: state.bias_accel,
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Series for `int_0^t exp(s W) a^ (int_0^s exp(-u W) du) ds` and its integral.
/// Returns `(Phi_vw / R, Phi_pw / R)`.
fn omega_blocks_series(w: &Vector3<f64>, a: &Vector3<f64>, t: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    const ORDER: usize = 8;
    let wx = skew(w);
    let ax = skew(a);
    let mut pow: Vec<Matrix3<f64>> = vec![Matrix3::identity()];
    for k in 1..=ORDER {
        pow.push(pow[k - 1] * wx);
    }
    let mut v = Matrix3::zeros();
    let mut p = Matrix3::zeros();
    for m in 0..=ORDER {
        for n in 0..=(ORDER - m) {
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            let k = (m + n) as i32;
            let c = sign / (factorial(m) * factorial(n + 1));
            let term = pow[m] * ax * pow[n] * c;
            v += term * (t.powi(k + 2) / (k + 2) as f64);
            p += term * (t.powi(k + 3) / ((k + 2) * (k + 3)) as f64);
        }
    }
    (v, p)
}

/// Closed-form transition matrix `Phi(tau, 0)` of the error dynamics.
pub fn transition_matrix(state: &ImuState, z: &InertialSample) -> Matrix15 {
    let t = z.dt;
    let w = z.omega - state.bias_gyro;
    let a = z.accel - state.bias_accel;
    let r = *state.rotation.matrix();
    let i3 = Matrix3::identity();
    let tw = w * t;
    let jl = left_jacobian(&tw);
    let jl_neg = left_jacobian(&(-tw));
    let hl = hl_matrix(&tw);
    let ax = skew(&a);

    let phi_tt = *so3_exp(&(-tw)).matrix();
    let phi_tg = -jl_neg * t;
    let phi_vt = -r * skew(&(jl * a)) * t;
    let phi_va = -r * jl * t;
    let phi_pt = -r * skew(&(hl * a)) * (t * t);
    let phi_pa = -r * hl * (t * t);

    let wn = w.norm();
    let (phi_vg, phi_pg) = if wn * t < PHI_SERIES_THRESHOLD {
        let (v, p) = omega_blocks_series(&w, &a, t);
        (r * v, r * p)
    } else {
        let wx = skew(&w);
        let w2 = wn * wn;
        let hl_neg = hl_matrix(&(-tw));
        let delta = so3_exp(&tw).matrix() * (i3 - wx * t) - i3;
        let common = ax / w2 * (i3 + wx * wx / w2);
        let outer = w * a.transpose() / w2;
        let dot = a.dot(&w) / w2;
        let vg = r * delta * common + r * (outer * (jl_neg - i3) + (jl - i3) * dot) * t;
        let pg = r * (jl * t - wx / w2 * delta - i3 * t) * common
            + r * (outer * (hl_neg * 2.0 - i3) + (hl * 2.0 - i3) * dot) * (0.5 * t * t);
        (vg, pg)
    };

    let mut phi = Matrix15::identity();
    let mut put = |row: usize, col: usize, m: &Matrix3<f64>| phi.fixed_view_mut::<3, 3>(row, col).copy_from(m);
    put(THETA, THETA, &phi_tt);
    put(THETA, BG, &phi_tg);
    put(VEL, THETA, &phi_vt);
    put(VEL, BG, &phi_vg);
    put(VEL, BA, &phi_va);
    put(POS, THETA, &phi_pt);
    put(POS, VEL, &(i3 * t));
    put(POS, BG, &phi_pg);
    put(POS, BA, &phi_pa);
    phi
}

/// Continuous-time error-dynamics matrix `F(t)`.
pub fn error_dynamics_matrix(state: &ImuState, z: &InertialSample, t: f64) -> Matrix15 {
    let w = z.omega - state.bias_gyro;
    let a = z.accel - state.bias_accel;
    let rt = state.rotation.matrix() * so3_exp(&(w * t)).matrix();
    let mut f = Matrix15::zeros();
    f.fixed_view_mut::<3, 3>(THETA, THETA).copy_from(&(-skew(&w)));
    f.fixed_view_mut::<3, 3>(THETA, BG).copy_from(&(-Matrix3::identity()));
    f.fixed_view_mut::<3, 3>(VEL, THETA).copy_from(&(-rt * skew(&a)));
    f.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&(-rt));
    f.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&Matrix3::identity());
    f
}

fn dmat15(m: &Matrix15) -> DMatrix<f64> {
    DMatrix::from_column_slice(IMU_DIM, IMU_DIM, m.as_slice())
}

/// Covariance propagation without touching the window:
/// `Sigma_II <- Phi (Sigma_II + tau Q) Phi^T`, `Sigma_IW <- Phi Sigma_IW`.
pub fn propagate_imu_covariance(
    fs: &FilterState,
    phi: &Matrix15,
    z: &InertialSample,
    noise: &ImuNoiseParams,
) -> DMatrix<f64> {
    let n = fs.dim();
    let phi_d = dmat15(phi);
    let mut s_ii = fs.covariance.view((0, 0), (IMU_DIM, IMU_DIM)).into_owned();
    s_ii += dmat15(&noise.q_matrix()) * z.dt;
    let mut out = fs.covariance.clone();
    out.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&(&phi_d * s_ii * phi_d.transpose()));
    if n > IMU_DIM {
        let s_iw = fs.covariance.view((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).into_owned();
        let new_iw = &phi_d * s_iw;
        out.view_mut((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).copy_from(&new_iw);
        out.view_mut((IMU_DIM, 0), (n - IMU_DIM, IMU_DIM)).copy_from(&new_iw.transpose());
    }
    let t = out.transpose();
    (out + t) * 0.5
}

/// The augmentation matrix `A_k` that propagates the IMU block, clones a pose
/// into slot 0 and drops the oldest slot.
pub fn augmentation_matrix(phi: &Matrix15, window_len: usize, insertion: WindowInsertion) -> DMatrix<f64> {
    let n = IMU_DIM + POSE_DIM * window_len;
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&dmat15(phi));
    if window_len == 0 {
        return a;
    }
    match insertion {
        WindowInsertion::Prior => {
            for i in 0..3 {
                a[(IMU_DIM + i, THETA + i)] = 1.0;
                a[(IMU_DIM + 3 + i, POS + i)] = 1.0;
            }
        }
        WindowInsertion::Propagated => {
            for i in 0..3 {
                for j in 0..IMU_DIM {
                    a[(IMU_DIM + i, j)] = phi[(THETA + i, j)];
                    a[(IMU_DIM + 3 + i, j)] = phi[(POS + i, j)];
                }
            }
        }
    }
    for k in 0..POSE_DIM * (window_len - 1) {
        a[(IMU_DIM + POSE_DIM + k, IMU_DIM + k)] = 1.0;
    }
    a
}

/// `Sigma <- A_k (Sigma + tau diag(Q, 0)) A_k^T` with the window shifted.
/// `frame` tags the new slot. The mean must be propagated separately.
pub fn propagate_covariance(
    fs: &FilterState,
    z: &InertialSample,
    noise: &ImuNoiseParams,
    insertion: WindowInsertion,
    frame: Option<u64>,
) -> Result<FilterState> {
    let phi = transition_matrix(&fs.imu, z);
    let a = augmentation_matrix(&phi, fs.window_len(), insertion);
    let mut s = fs.covariance.clone();
    let q = noise.q_matrix() * z.dt;
    for i in 0..IMU_DIM {
        for j in 0..IMU_DIM {
            s[(i, j)] += q[(i, j)];
        }
    }
    let mut out = fs.clone();
    out.covariance = &a * s * a.transpose();
    out.symmetrize();
    if !out.window.is_empty() {
        let pose = match insertion {
            WindowInsertion::Prior => fs.imu.pose(),
            WindowInsertion::Propagated => propagate_mean(&fs.imu, z, &fs.gravity).pose(),
        };
        out.window.pop();
        out.window.insert(
            0,
            WindowSlot { frame, time: fs.time + z.dt * f64::from(insertion == WindowInsertion::Propagated), pose },
        );
    }
    Ok(out)
}

/// Mean and covariance prediction for one sample. With `clone` set, the
/// window is augmented per [`propagate_covariance`].
pub fn predict(
    fs: &FilterState,
    z: &InertialSample,
    noise: &ImuNoiseParams,
    clone: Option<(WindowInsertion, Option<u64>)>,
) -> Result<FilterState> {
    let mut out = match clone {
        Some((insertion, frame)) => propagate_covariance(fs, z, noise, insertion, frame)?,
        None => {
            let phi = transition_matrix(&fs.imu, z);
            let mut o = fs.clone();
            o.covariance = propagate_imu_covariance(fs, &phi, z, noise);
            o
        }
    };
    out.imu = propagate_mean(&fs.imu, z, &fs.gravity);
    out.time = fs.time + z.dt;
    Ok(out)
}

/// Clones the current pose into the window without propagating (`Phi = I`).
pub fn augment_window(fs: &FilterState, frame: Option<u64>) -> FilterState {
    let a = augmentation_matrix(&Matrix15::identity(), fs.window_len(), WindowInsertion::Prior);
    let mut out = fs.clone();
    out.covariance = &a * &fs.covariance * a.transpose();
    out.symmetrize();
    if !out.window.is_empty() {
        out.window.pop();
        out.window.insert(0, WindowSlot { frame, time: fs.time, pose: fs.imu.pose() });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_input_moves_only_by_velocity() {
        let s = ImuState {
            rotation: so3_exp(&Vector3::new(0.1, 0.2, 0.3)),
            velocity: Vector3::new(1.0, -1.0, 0.5),
            position: Vector3::new(3.0, 2.0, 1.0),
            bias_gyro: Vector3::new(0.01, 0.0, -0.02),
            bias_accel: Vector3::new(0.1, 0.2, 0.3),
        };
        let z = InertialSample::new(s.bias_gyro, s.bias_accel, 0.01);
        let out = propagate_mean(&s, &z, &Vector3::zeros());
        assert_eq!(out.rotation, s.rotation);
        assert_eq!(out.velocity, s.velocity);
        assert!((out.position - (s.position + s.velocity * 0.01)).norm() < 1e-15);
    }

    #[test]
    fn ballistic_unit_step() {
        let s = ImuState { velocity: Vector3::new(1.0, 0.0, 0.0), ..Default::default() };
        let z = InertialSample::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 1.0);
        let out = propagate_mean(&s, &z, &Vector3::zeros());
        assert_eq!(out.velocity, Vector3::new(1.0, 0.0, 1.0));
        assert_eq!(out.position, Vector3::new(1.0, 0.0, 0.5));
    }

    #[test]
    fn free_fall_is_exact() {
        let mut s = ImuState { velocity: Vector3::new(0.5, 0.0, 2.0), ..Default::default() };
        let g = default_gravity();
        let z = InertialSample::new(Vector3::zeros(), Vector3::zeros(), 0.01);
        for _ in 0..100 {
            s = propagate_mean(&s, &z, &g);
        }
        let t = 1.0;
        let expected = Vector3::new(0.5, 0.0, 2.0) * t + g * (0.5 * t * t);
        assert!((s.position - expected).norm() < 1e-12);
    }

    #[test]
    fn bias_rows_are_identity_selectors() {
        let s = ImuState { rotation: so3_exp(&Vector3::new(0.3, -0.4, 0.2)), ..Default::default() };
        let z = InertialSample::new(Vector3::new(0.5, 1.0, -2.0), Vector3::new(1.0, 9.0, 2.0), 0.005);
        let phi = transition_matrix(&s, &z);
        for i in 0..6 {
            for j in 0..15 {
                let expected = if i + 9 == j { 1.0 } else { 0.0 };
                assert_eq!(phi[(9 + i, j)], expected);
            }
        }
    }

    #[test]
    fn phi_small_rate_limits() {
        let r = so3_exp(&Vector3::new(0.2, 0.1, -0.3));
        let s = ImuState { rotation: r, ..Default::default() };
        let a = Vector3::new(0.3, -1.0, 9.7);
        let tau = 0.005;
        let z = InertialSample::new(Vector3::zeros(), a, tau);
        let phi = transition_matrix(&s, &z);
        let r = *r.matrix();
        let blk = |i: usize, j: usize| phi.fixed_view::<3, 3>(i, j).into_owned();
        assert!((blk(VEL, THETA) + r * skew(&a) * tau).norm() < 1e-15);
        assert!((blk(VEL, BA) + r * tau).norm() < 1e-15);
        assert!((blk(POS, BA) + r * (0.5 * tau * tau)).norm() < 1e-15);
        assert!((blk(POS, THETA) + r * skew(&a) * (0.5 * tau * tau)).norm() < 1e-15);
    }

    #[test]
    fn bias_walk_grows_diagonal_linearly() {
        let noise = ImuNoiseParams::default();
        let fs = FilterState::new(0.0, ImuState::default(), &Matrix15::zeros(), 2, Pose::identity());
        let z = InertialSample::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81), 0.005);
        let out = predict(&fs, &z, &noise, None).unwrap();
        let c = &out.covariance;
        assert!((c[(BG, BG)] - 0.005 * noise.sigma_gyro_bias.powi(2)).abs() < 1e-20);
        assert!((c[(BA, BA)] - 0.005 * noise.sigma_accel_bias.powi(2)).abs() < 1e-18);
    }

    #[test]
    fn augmentation_shifts_window_and_copies_pose_block() {
        let mut cov = Matrix15::zeros();
        for i in 0..15 {
            cov[(i, i)] = 1.0 + i as f64;
        }
        let fs = FilterState::new(0.0, ImuState::default(), &cov, 3, Pose::identity());
        let out = augment_window(&fs, Some(7));
        assert_eq!(out.window[0].frame, Some(7));
        assert_eq!(out.window.len(), 3);
        let o = FilterState::slot_offset(0);
        assert_eq!(out.covariance[(o, o)], cov[(0, 0)]);
        assert_eq!(out.covariance[(o + 3, o + 3)], cov[(POS, POS)]);
        assert_eq!(out.covariance[(o + 3, POS)], cov[(POS, POS)]);
    }
}
