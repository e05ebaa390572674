//! Browser bindings for a few objvio primitives, driven by `www/index.html`.

use nalgebra::{Matrix2, Matrix3, Matrix3x4, Vector2, Vector3};
use objvio::imu::{propagate_mean, ImuState, InertialSample};
use objvio::lie::{default_gravity, dual_quadric, skew, transform_dual_quadric, Pose, Rotation};
use objvio::residuals::{tangent_distance as signed_distance, ObjectInstance, PlaneInObjectFrame};
use objvio::sim::{car_class, projected_bbox};
use wasm_bindgen::prelude::*;

/// Signed distance between the plane `b . x = bh` and the closest parallel
/// tangent plane of the axis-aligned ellipsoid with semi-axes `u`. NaN for
/// invalid input.
#[wasm_bindgen]
pub fn tangent_distance(bx: f64, by: f64, bz: f64, bh: f64, ux: f64, uy: f64, uz: f64) -> f64 {
    let plane = PlaneInObjectFrame { normal: Vector3::new(bx, by, bz), offset: bh };
    signed_distance(&plane, &Vector3::new(ux, uy, uz)).unwrap_or(f64::NAN)
}

/// Projects an ellipsoid seen by a camera at the origin looking along +z.
/// The object sits at `(x, y, depth)` with yaw and pitch in radians.
/// Returns `[x_min, x_max, y_min, y_max]` of the tangent bbox followed by
/// `samples` outline points as `x, y` pairs, all in normalized image
/// coordinates. Empty when the ellipsoid is not fully in front.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn project_ellipsoid(
    x: f64,
    y: f64,
    depth: f64,
    yaw: f64,
    pitch: f64,
    ux: f64,
    uy: f64,
    uz: f64,
    samples: usize,
) -> Vec<f64> {
    let mut cls = car_class();
    cls.mean_semiaxes = Vector3::new(ux, uy, uz);
    if cls.validate().is_err() {
        return Vec::new();
    }
    let rot = Rotation::exp(&Vector3::new(0.0, pitch, 0.0)) * Rotation::exp(&Vector3::new(0.0, 0.0, yaw));
    let inst = ObjectInstance::undeformed(&cls, Pose::new(rot, Vector3::new(x, y, depth)));
    let Ok(bbox) = projected_bbox(&Pose::identity(), &inst, &cls) else { return Vec::new() };
    let mut out = bbox.to_vec();
    if let Some(points) = outline(&inst.pose, &cls.mean_semiaxes, samples) {
        out.extend(points.iter().flat_map(|p| [p.x, p.y]));
    }
    out
}

/// Points on the image ellipse of a posed ellipsoid.
fn outline(pose: &Pose, u: &Vector3<f64>, samples: usize) -> Option<Vec<Vector2<f64>>> {
    let q = transform_dual_quadric(pose, &dual_quadric(u).ok()?);
    let p = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let dual = p * q.matrix() * p.transpose();
    let c: Matrix3<f64> = dual.try_inverse()?;
    let m = Matrix2::new(c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]);
    let b = Vector2::new(c[(0, 2)], c[(1, 2)]);
    let center = -m.try_inverse()? * b;
    let s = center.dot(&(m * center)) - c[(2, 2)];
    let eig = m.symmetric_eigen();
    let radii = eig.eigenvalues.map(|l| (s / l).sqrt());
    if radii.iter().any(|r| !r.is_finite()) {
        return None;
    }
    Some(
        (0..samples)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / samples as f64;
                center + eig.eigenvectors * Vector2::new(radii[0] * t.cos(), radii[1] * t.sin())
            })
            .collect(),
    )
}

/// Propagates a state starting at rest at the origin under constant body
/// rate `w` and specific force `a` for `steps` samples of length `dt`, once
/// with the closed-form step and once with RK4 at `substeps` per sample.
/// Returns `[px, py, pz]` per step for the closed form, then the same for
/// RK4, then the largest position gap.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn propagate_compare(
    wx: f64,
    wy: f64,
    wz: f64,
    ax: f64,
    ay: f64,
    az: f64,
    dt: f64,
    steps: usize,
    substeps: usize,
) -> Vec<f64> {
    let g = default_gravity();
    let z = InertialSample::new(Vector3::new(wx, wy, wz), Vector3::new(ax, ay, az), dt);
    let mut closed = ImuState::default();
    let mut rk = (Matrix3::identity(), Vector3::zeros(), Vector3::zeros());
    let mut a: Vec<f64> = Vec::with_capacity(3 * steps);
    let mut b: Vec<f64> = Vec::with_capacity(3 * steps);
    let mut gap: f64 = 0.0;
    for _ in 0..steps {
        closed = propagate_mean(&closed, &z, &g);
        for _ in 0..substeps.max(1) {
            rk = rk4_step(rk, &z.omega, &z.accel, &g, dt / substeps.max(1) as f64);
        }
        a.extend(closed.position.iter());
        b.extend(rk.2.iter());
        gap = gap.max((closed.position - rk.2).norm());
    }
    a.extend(b);
    a.push(gap);
    a
}

type Nominal = (Matrix3<f64>, Vector3<f64>, Vector3<f64>);

/// One RK4 step of `R' = R [w]x`, `v' = R a + g`, `p' = v`.
fn rk4_step(s: Nominal, w: &Vector3<f64>, a: &Vector3<f64>, g: &Vector3<f64>, h: f64) -> Nominal {
    let wx = skew(w);
    let f = |s: &Nominal| (s.0 * wx, s.0 * a + g, s.1);
    let add = |s: &Nominal, k: &Nominal, c: f64| (s.0 + k.0 * c, s.1 + k.1 * c, s.2 + k.2 * c);
    let k1 = f(&s);
    let k2 = f(&add(&s, &k1, 0.5 * h));
    let k3 = f(&add(&s, &k2, 0.5 * h));
    let k4 = f(&add(&s, &k3, h));
    (
        s.0 + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * (h / 6.0),
        s.1 + (k1.1 + k2.1 * 2.0 + k3.1 * 2.0 + k4.1) * (h / 6.0),
        s.2 + (k1.2 + k2.2 * 2.0 + k3.2 * 2.0 + k4.2) * (h / 6.0),
    )
}
