//! Independent numerical oracles shared by the integration tests: truncated
//! series, quadrature, RK4 integration and central finite differences.
#![allow(dead_code)]

pub mod jac;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use objvio::imu::{ImuState, InertialSample, Matrix15, BA, BG, POS, THETA, VEL};
use objvio::lie::{skew, so3_exp, Rotation};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Rng(pub ChaCha8Rng);

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    pub fn vec3(&mut self, scale: f64) -> Vector3<f64> {
        Vector3::new(self.uniform(-scale, scale), self.uniform(-scale, scale), self.uniform(-scale, scale))
    }

    /// Uniformly random direction scaled to `norm`.
    pub fn direction(&mut self, norm: f64) -> Vector3<f64> {
        loop {
            let v = self.vec3(1.0);
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n * norm;
            }
        }
    }

    pub fn rotation(&mut self) -> Rotation {
        let angle = self.uniform(0.0, std::f64::consts::PI);
        so3_exp(&self.direction(angle))
    }
}

/// `sum_{n < terms} m^n / (n + shift)!`.
pub fn matrix_series(m: &Matrix3<f64>, terms: usize, shift: usize) -> Matrix3<f64> {
    let mut acc = Matrix3::zeros();
    let mut pow = Matrix3::identity();
    let mut fact: f64 = (1..=shift).map(|k| k as f64).product();
    for n in 0..terms {
        acc += pow / fact;
        pow *= m;
        fact *= (n + shift + 1) as f64;
    }
    acc
}

pub fn exp_series(m: &Matrix3<f64>) -> Matrix3<f64> {
    matrix_series(m, 50, 0)
}

/// Composite Gauss-Legendre quadrature (5 points per panel) of a matrix function on `[a, b]`.
pub fn quadrature(f: impl Fn(f64) -> Matrix3<f64>, a: f64, b: f64, panels: usize) -> Matrix3<f64> {
    const X: [f64; 5] = [0.0, -0.5384693101056831, 0.5384693101056831, -0.906179845938664, 0.906179845938664];
    const W: [f64; 5] =
        [0.5688888888888889, 0.47862867049936647, 0.47862867049936647, 0.23692688505618908, 0.23692688505618908];
    let h = (b - a) / panels as f64;
    let mut acc = Matrix3::zeros();
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (x, w) in X.iter().zip(W) {
            acc += f(mid + 0.5 * h * x) * (0.5 * h * w);
        }
    }
    acc
}

pub fn random_imu_case(rng: &mut Rng, dt: f64) -> (ImuState, InertialSample) {
    let state = ImuState {
        rotation: rng.rotation(),
        velocity: rng.vec3(3.0),
        position: rng.vec3(10.0),
        bias_gyro: rng.vec3(0.05),
        bias_accel: rng.vec3(0.2),
    };
    let rate = rng.uniform(0.0, 4.0);
    let omega = state.bias_gyro + rng.direction(rate);
    let acc = rng.uniform(0.0, 20.0);
    let accel = state.bias_accel + rng.direction(acc);
    (state, InertialSample::new(omega, accel, dt))
}

/// Classical RK4 on the nominal dynamics with the rotation as a plain matrix.
pub fn rk4_mean(state: &ImuState, z: &InertialSample, g: &Vector3<f64>, h: f64) -> ImuState {
    let w = skew(&(z.omega - state.bias_gyro));
    let a = z.accel - state.bias_accel;
    let steps = (z.dt / h).round() as usize;
    let h = z.dt / steps as f64;
    let mut r = *state.rotation.matrix();
    let mut v = state.velocity;
    let mut p = state.position;
    let f = |r: &Matrix3<f64>, v: &Vector3<f64>| (r * w, r * a + g, *v);
    for _ in 0..steps {
        let (k1r, k1v, k1p) = f(&r, &v);
        let (k2r, k2v, k2p) = f(&(r + k1r * (h / 2.0)), &(v + k1v * (h / 2.0)));
        let (k3r, k3v, k3p) = f(&(r + k2r * (h / 2.0)), &(v + k2v * (h / 2.0)));
        let (k4r, k4v, k4p) = f(&(r + k3r * h), &(v + k3v * h));
        r += (k1r + k2r * 2.0 + k3r * 2.0 + k4r) * (h / 6.0);
        v += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (h / 6.0);
        p += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
    }
    ImuState {
        rotation: Rotation::from_matrix(r),
        velocity: v,
        position: p,
        bias_gyro: state.bias_gyro,
        bias_accel: state.bias_accel,
    }
}

/// The error-dynamics matrix assembled from its definition, independent of
/// the library's own helper.
fn f_matrix(state: &ImuState, z: &InertialSample, t: f64) -> Matrix15 {
    let w = z.omega - state.bias_gyro;
    let a = z.accel - state.bias_accel;
    let rt = state.rotation.matrix() * exp_series(&(skew(&w) * t));
    let mut f = Matrix15::zeros();
    f.fixed_view_mut::<3, 3>(THETA, THETA).copy_from(&(-skew(&w)));
    f.fixed_view_mut::<3, 3>(THETA, BG).copy_from(&(-Matrix3::identity()));
    f.fixed_view_mut::<3, 3>(VEL, THETA).copy_from(&(-rt * skew(&a)));
    f.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&(-rt));
    f.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&Matrix3::identity());
    f
}

/// RK4 integration of `dPhi/dt = F(t) Phi`, `Phi(0) = I`.
pub fn rk4_transition(state: &ImuState, z: &InertialSample, h: f64) -> Matrix15 {
    let steps = (z.dt / h).round() as usize;
    let h = z.dt / steps as f64;
    let mut phi = Matrix15::identity();
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = f_matrix(state, z, t) * phi;
        let k2 = f_matrix(state, z, t + h / 2.0) * (phi + k1 * (h / 2.0));
        let k3 = f_matrix(state, z, t + h / 2.0) * (phi + k2 * (h / 2.0));
        let k4 = f_matrix(state, z, t + h) * (phi + k3 * h);
        phi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    phi
}

/// Central-difference Jacobian of `f` at `x0` along `dim` coordinates, where
/// `f` receives the perturbation vector.
pub fn central_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, dim: usize, h: f64) -> DMatrix<f64> {
    let f0 = f(&DVector::zeros(dim));
    let mut j = DMatrix::zeros(f0.len(), dim);
    for c in 0..dim {
        let mut d = DVector::zeros(dim);
        d[c] = h;
        let fp = f(&d);
        d[c] = -h;
        let fm = f(&d);
        j.set_column(c, &((fp - fm) / (2.0 * h)));
    }
    j
}

/// Relative Jacobian error `|A - B| / max(|B|, floor)` in the max norm.
pub fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs().max();
    diff / numeric.abs().max().max(analytic.abs().max()).max(floor)
}

/// Worst error of the closed-form `J_L` and `H_L` against their 50-term
/// series and against the integral identities
/// `J_L = int_0^1 exp(s w^) ds`, `H_L = int_0^1 (1 - s) exp(s w^) ds`,
/// over rotation magnitudes log-spaced in `[1e-8, pi]`.
pub fn rodrigues_worst(rng: &mut Rng, samples: usize) -> (f64, f64) {
    use objvio::lie::{hl_matrix, left_jacobian};
    let mut series_err: f64 = 0.0;
    let mut quad_err: f64 = 0.0;
    let lo = 1e-8_f64.ln();
    let hi = std::f64::consts::PI.ln();
    for k in 0..samples {
        let mag = (lo + (hi - lo) * k as f64 / (samples - 1) as f64).exp();
        let w = rng.direction(mag);
        let wx = skew(&w);
        let jl = left_jacobian(&w);
        let hl = hl_matrix(&w);
        series_err = series_err.max((jl - matrix_series(&wx, 50, 1)).abs().max());
        series_err = series_err.max((hl - matrix_series(&wx, 50, 2)).abs().max());
        let jq = quadrature(|s| exp_series(&(wx * s)), 0.0, 1.0, 8);
        let hq = quadrature(|s| exp_series(&(wx * s)) * (1.0 - s), 0.0, 1.0, 8);
        quad_err = quad_err.max((jl - jq).abs().max()).max((hl - hq).abs().max());
    }
    (series_err, quad_err)
}

/// Signed distance from the plane `b^T x = b_h` to the nearer of the two
/// tangent planes of the ellipsoid `diag(u)` parallel to it, found by
/// maximizing the support function over the surface numerically.
pub fn tangent_distance_numeric(b: &Vector3<f64>, bh: f64, u: &Vector3<f64>) -> f64 {
    let nb = b.norm();
    let n = b / nb;
    let support = |phi: f64, psi: f64| {
        let x = Vector3::new(u.x * psi.sin() * phi.cos(), u.y * psi.sin() * phi.sin(), u.z * psi.cos());
        n.dot(&x)
    };
    // Coarse grid, then a shrinking pattern search around the best point.
    let (mut best, mut bp, mut bs) = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..360 {
        for j in 0..=180 {
            let (phi, psi) = (i as f64 * std::f64::consts::TAU / 360.0, j as f64 * std::f64::consts::PI / 180.0);
            let v = support(phi, psi);
            if v > best {
                (best, bp, bs) = (v, phi, psi);
            }
        }
    }
    let mut step = 0.02;
    while step > 1e-13 {
        let mut moved = false;
        for (dp, ds) in [
            (step, 0.0),
            (-step, 0.0),
            (0.0, step),
            (0.0, -step),
            (step, step),
            (-step, -step),
            (step, -step),
            (-step, step),
        ] {
            let v = support(bp + dp, bs + ds);
            if v > best {
                (best, bp, bs) = (v, bp + dp, bs + ds);
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    // The ellipsoid is centrally symmetric: the tangent planes sit at +-best.
    let offset = bh / nb;
    let near = if (best - offset).abs() <= (-best - offset).abs() { best } else { -best };
    near - offset
}
