//! Finite-difference checks of every analytic Jacobian, on random
//! nondegenerate configurations.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3, Vector6};
use objvio::imu::{ImuState, InertialSample};
use objvio::lie::{default_gravity, left_jacobian, perturb_imu_pose, project, so3_exp, so3_log, Pose, Rotation, Twist};
use objvio::residuals::{
    bbox_error, bbox_error_quadratic, geometric_error, regularization_error, semantic_error, zero_velocity_error,
    BBoxLine, ObjectClass, ObjectInstance, ObjectResidual,
};
use objvio::Result;

use super::{central_jacobian, relative_error, Rng};

pub const STEP: f64 = 1e-6;

pub struct Check {
    pub name: &'static str,
    pub worst: f64,
    pub configs: usize,
}

fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn twist(d: &DVector<f64>, at: usize) -> Twist {
    Twist::from_vector(&Vector6::from_fn(|i, _| d[at + i]))
}

fn imu_delta(d: &DVector<f64>) -> Vector6<f64> {
    Vector6::from_fn(|i, _| d[i])
}

/// Log map of SE(3) written out for the oracle.
pub fn se3_log(t: &Pose) -> Vector6<f64> {
    let theta = so3_log(&t.rotation);
    let rho = left_jacobian(&theta).try_inverse().expect("invertible") * t.translation;
    Vector6::new(rho.x, rho.y, rho.z, theta.x, theta.y, theta.z)
}

pub fn random_pose(rng: &mut Rng, spread: f64) -> Pose {
    Pose::new(rng.rotation(), rng.vec3(spread))
}

/// A camera-to-IMU mounting with the optical axis along the IMU x axis.
pub fn typical_extrinsics(rng: &mut Rng) -> Pose {
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let r = Rotation::from_matrix(base) * so3_exp(&rng.vec3(0.1));
    Pose::new(r, rng.vec3(0.1))
}

/// Places a point in front of `cam` at a random depth.
pub fn point_in_front(rng: &mut Rng, cam: &Pose, depth: (f64, f64)) -> Vector3<f64> {
    let d = rng.uniform(depth.0, depth.1);
    let local = Vector3::new(rng.uniform(-0.4, 0.4) * d, rng.uniform(-0.3, 0.3) * d, d);
    cam.transform_point(&local)
}

pub fn random_class(rng: &mut Rng, landmarks: usize) -> ObjectClass {
    let u = Vector3::new(rng.uniform(0.5, 2.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0));
    ObjectClass {
        semantic_id: 1,
        name: "random".into(),
        mean_landmarks: (0..landmarks)
            .map(|_| Vector3::new(rng.uniform(-u.x, u.x), rng.uniform(-u.y, u.y), rng.uniform(-u.z, u.z)))
            .collect(),
        mean_semiaxes: u,
    }
}

pub fn random_instance(rng: &mut Rng, cls: &ObjectClass, pose: Pose) -> ObjectInstance {
    ObjectInstance {
        pose,
        delta_landmarks: (0..cls.num_landmarks()).map(|_| rng.vec3(0.05)).collect(),
        delta_semiaxes: rng.vec3(0.05),
    }
}

struct Scene {
    imu: Pose,
    extr: Pose,
    cam: Pose,
}

fn random_scene(rng: &mut Rng) -> Scene {
    let imu = random_pose(rng, 5.0);
    let extr = typical_extrinsics(rng);
    Scene { imu, extr, cam: imu * extr }
}

/// Errors of the three object-residual Jacobian groups against finite
/// differences: camera twist, IMU pose, object parameters.
fn check_object_residual(
    s: &Scene,
    dim: usize,
    inst: &ObjectInstance,
    f: impl Fn(&Pose, &Pose, &ObjectInstance) -> Result<ObjectResidual>,
) -> Option<[f64; 3]> {
    let id = Pose::identity();
    let r = f(&s.imu, &s.extr, inst).ok()?;
    let jc = central_jacobian(|d| f(&s.cam.perturb(&twist(d, 0)), &id, inst).unwrap().error, 6, STEP);
    let ji = central_jacobian(|d| f(&perturb_imu_pose(&s.imu, &imu_delta(d)), &s.extr, inst).unwrap().error, 6, STEP);
    let jo = central_jacobian(|d| f(&s.imu, &s.extr, &inst.oplus(d)).unwrap().error, dim, STEP);
    Some([
        relative_error(&r.jac_cam, &jc, 1e-3),
        relative_error(&r.jac_imu, &ji, 1e-3),
        relative_error(&r.jac_obj, &jo, 1e-3),
    ])
}

fn object_setup(rng: &mut Rng, landmarks: usize) -> (Scene, ObjectClass, ObjectInstance) {
    let s = random_scene(rng);
    let cls = random_class(rng, landmarks);
    let center = point_in_front(rng, &s.cam, (5.0, 15.0));
    let pose = Pose::new(rng.rotation(), center);
    let inst = random_instance(rng, &cls, pose);
    (s, cls, inst)
}

/// A bbox line of the object: a line through a random point near the
/// projected center, oriented to keep the center inside.
fn random_line(rng: &mut Rng, s: &Scene, inst: &ObjectInstance) -> Option<BBoxLine> {
    let c = s.cam.inverse().transform_point(&inst.pose.translation);
    let centre = Vector2::new(c.x / c.z, c.y / c.z);
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let n = Vector2::new(angle.cos(), angle.sin());
    let offset = rng.uniform(0.05, 0.3);
    let through = centre + n * offset;
    let line = Vector3::new(n.x, n.y, -n.dot(&through));
    BBoxLine::normalized(line, &centre).ok()
}

fn fold(worst: &mut [f64], errs: &[f64]) {
    for (w, e) in worst.iter_mut().zip(errs) {
        *w = w.max(*e);
    }
}

pub fn run_all(n: usize, seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = Rng::seeded(seed);

    // Perspective projection.
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let p = nalgebra::Vector4::new(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(0.5, 5.0), 1.0);
        let (_, j) = project(&p, 1e-3).unwrap();
        let num = central_jacobian(
            |d| {
                let q = p + nalgebra::Vector4::new(d[0], d[1], d[2], d[3]);
                let (pi, _) = objvio::lie::perspective(&q);
                dv(pi.as_slice())
            },
            4,
            STEP,
        );
        worst = worst.max(relative_error(&DMatrix::from_column_slice(4, 4, j.as_slice()), &num, 1e-3));
    }
    out.push(Check { name: "perspective projection", worst, configs: n });

    // Camera twist as a function of the IMU pose perturbation.
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let s = random_scene(&mut rng);
        let j = objvio::lie::camera_from_imu_jacobian(&s.imu, &s.extr);
        let cam_inv = s.cam.inverse();
        let num = central_jacobian(
            |d| {
                let c = perturb_imu_pose(&s.imu, &imu_delta(d)) * s.extr;
                dv(se3_log(&(cam_inv * c)).as_slice())
            },
            6,
            STEP,
        );
        worst = worst.max(relative_error(&DMatrix::from_column_slice(6, 6, j.as_slice()), &num, 1e-3));
    }
    out.push(Check { name: "camera twist from imu pose", worst, configs: n });

    // Geometric keypoints.
    let mut worst = [0.0_f64; 3];
    let mut done = 0;
    while done < n {
        let s = random_scene(&mut rng);
        let l = point_in_front(&mut rng, &s.cam, (1.0, 20.0));
        let z = Vector2::new(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
        let id = Pose::identity();
        let Ok(r) = geometric_error(&s.imu, &s.extr, &l, &z, 1e-3) else {
            continue;
        };
        let e = |imu: &Pose, extr: &Pose, l: &Vector3<f64>| {
            dv(geometric_error(imu, extr, l, &z, 1e-3).unwrap().error.as_slice())
        };
        let jc = central_jacobian(|d| e(&s.cam.perturb(&twist(d, 0)), &id, &l), 6, STEP);
        let ji = central_jacobian(|d| e(&perturb_imu_pose(&s.imu, &imu_delta(d)), &s.extr, &l), 6, STEP);
        let jl = central_jacobian(|d| e(&s.imu, &s.extr, &(l + Vector3::new(d[0], d[1], d[2]))), 3, STEP);
        fold(
            &mut worst,
            &[
                relative_error(&DMatrix::from_column_slice(2, 6, r.jac_cam.as_slice()), &jc, 1e-3),
                relative_error(&DMatrix::from_column_slice(2, 6, r.jac_imu.as_slice()), &ji, 1e-3),
                relative_error(&DMatrix::from_column_slice(2, 3, r.jac_landmark.as_slice()), &jl, 1e-3),
            ],
        );
        done += 1;
    }
    out.push(Check { name: "geometric keypoint / camera", worst: worst[0], configs: n });
    out.push(Check { name: "geometric keypoint / imu pose", worst: worst[1], configs: n });
    out.push(Check { name: "geometric keypoint / landmark", worst: worst[2], configs: n });

    // Semantic keypoints.
    let mut worst = [0.0_f64; 3];
    let mut done = 0;
    while done < n {
        let (s, cls, inst) = object_setup(&mut rng, 12);
        let l = (rng.uniform(0.0, 12.0) as usize).min(11);
        let z = Vector2::new(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
        let f = |imu: &Pose, extr: &Pose, o: &ObjectInstance| semantic_error(imu, extr, &cls, o, l, &z, 1e-3);
        let Some(errs) = check_object_residual(&s, cls.param_dim(), &inst, f) else {
            continue;
        };
        fold(&mut worst, &errs);
        done += 1;
    }
    out.push(Check { name: "semantic keypoint / camera", worst: worst[0], configs: n });
    out.push(Check { name: "semantic keypoint / imu pose", worst: worst[1], configs: n });
    out.push(Check { name: "semantic keypoint / object", worst: worst[2], configs: n });

    // Bounding-box tangent distance and its quadratic alternative.
    for quadratic in [false, true] {
        let mut worst = [0.0_f64; 3];
        let mut done = 0;
        while done < n {
            let (s, cls, inst) = object_setup(&mut rng, 4);
            let Some(line) = random_line(&mut rng, &s, &inst) else {
                continue;
            };
            let plane = objvio::residuals::plane_from_bbox_line(&s.cam, &inst.pose, &line);
            match plane {
                // Keep away from the sign switch of the tangent distance.
                Ok(p) if p.offset.abs() > 1e-2 * p.normal.norm() => {}
                _ => continue,
            }
            let f = |imu: &Pose, extr: &Pose, o: &ObjectInstance| {
                if quadratic {
                    bbox_error_quadratic(imu, extr, &cls, o, &line)
                } else {
                    bbox_error(imu, extr, &cls, o, &line)
                }
            };
            let Some(errs) = check_object_residual(&s, cls.param_dim(), &inst, f) else {
                continue;
            };
            fold(&mut worst, &errs);
            done += 1;
        }
        let (a, b, c) = if quadratic {
            ("quadratic bbox / camera", "quadratic bbox / imu pose", "quadratic bbox / object")
        } else {
            ("bbox tangent distance / camera", "bbox tangent distance / imu pose", "bbox tangent distance / object")
        };
        out.push(Check { name: a, worst: worst[0], configs: n });
        out.push(Check { name: b, worst: worst[1], configs: n });
        out.push(Check { name: c, worst: worst[2], configs: n });
    }

    // Shape regularization.
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let cls = random_class(&mut rng, 12);
        let pose = random_pose(&mut rng, 3.0);
        let inst = random_instance(&mut rng, &cls, pose);
        let (_, j) = regularization_error(&cls, &inst);
        let num = central_jacobian(|d| regularization_error(&cls, &inst.oplus(d)).0, cls.param_dim(), STEP);
        worst = worst.max(relative_error(&j, &num, 1e-3));
    }
    out.push(Check { name: "shape regularization", worst, configs: n });

    // Zero-velocity pseudo measurement.
    let mut worst = 0.0_f64;
    let g = default_gravity();
    for _ in 0..n {
        let state = ImuState {
            rotation: rng.rotation(),
            velocity: rng.vec3(0.1),
            position: rng.vec3(5.0),
            bias_gyro: rng.vec3(0.05),
            bias_accel: rng.vec3(0.2),
        };
        let z = InertialSample::new(rng.vec3(0.1), state.rotation.inverse() * (-g) + rng.vec3(0.3), 0.005);
        let (_, j) = zero_velocity_error(&state, &z, &g);
        let num =
            central_jacobian(|d| dv(zero_velocity_error(&state.oplus(d.as_slice()), &z, &g).0.as_slice()), 15, STEP);
        worst = worst.max(relative_error(&DMatrix::from_column_slice(6, 15, j.as_slice()), &num, 1e-3));
    }
    out.push(Check { name: "zero velocity", worst, configs: n });

    out
}
