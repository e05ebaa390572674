//! Synthetic ground truth, noisy inertial and camera measurements, and
//! trajectory / object evaluation metrics.

use nalgebra::{Matrix3, Matrix3x4, SMatrix, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{propagate_mean, ImuNoiseParams, ImuState, InertialSample};
use crate::lie::{default_gravity, skew, so3_exp, transform_dual_quadric, DualQuadric, Pose, Rotation};
use crate::msckf::{KeypointMeasurement, MeasurementFrame, ObjectMeasurement};
use crate::object::SemanticKeypoint;
use crate::residuals::{BBoxLine, ObjectClass, ObjectInstance};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryKind {
    /// Horizontal circle at constant angular rate, facing along the path.
    Circle { radius: f64, rate: f64 },
    /// `x = a_x sin(w_x t)`, `y = a_y sin(w_y t)`, `z = a_z sin(w_z t)`,
    /// facing along the horizontal velocity.
    Lissajous { amplitude: [f64; 3], frequency: [f64; 3] },
    /// Circle with cosine speed ramps into and out of one static segment.
    StopAndGo { radius: f64, speed: f64, stop_at: f64, stop_for: f64, ramp: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub duration: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    /// Height of the path above the ground.
    pub height: f64,
    /// Roll and pitch oscillation amplitude in radians (ignored for
    /// stop-and-go, which must be exactly static while stopped).
    pub wobble: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            kind: TrajectoryKind::Circle { radius: 5.0, rate: 0.2 },
            duration: 60.0,
            imu_rate: 200.0,
            cam_rate: 20.0,
            height: 1.0,
            wobble: 0.05,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.duration) || !positive(self.imu_rate) || !positive(self.cam_rate) {
            return Err(Error::InvalidInput("duration and rates must be positive".into()));
        }
        let ratio = self.imu_rate / self.cam_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::InvalidInput("imu rate must be an integer multiple of the camera rate".into()));
        }
        match self.kind {
            TrajectoryKind::Circle { radius, .. } if !positive(radius) => {
                Err(Error::InvalidInput("circle radius must be positive".into()))
            }
            TrajectoryKind::StopAndGo { radius, speed, stop_for, ramp, stop_at } => {
                if !positive(radius) || !positive(speed) || !positive(ramp) || stop_for < 0.0 || stop_at < 0.0 {
                    Err(Error::InvalidInput("invalid stop-and-go parameters".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn imu_dt(&self) -> f64 {
        1.0 / self.imu_rate
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.imu_rate / self.cam_rate).round() as usize
    }
}

/// Exact kinematic state at one instant. `omega` and `specific_force` are
/// in the body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub rotation: Rotation,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
    pub omega: Vector3<f64>,
    pub specific_force: Vector3<f64>,
}

/// Arc length, speed and tangential acceleration of the stop-and-go profile.
fn stop_and_go_profile(t: f64, speed: f64, stop_at: f64, stop_for: f64, ramp: f64) -> (f64, f64, f64) {
    use std::f64::consts::PI;
    let t1 = stop_at;
    let t2 = t1 + ramp;
    let t3 = t2 + stop_for;
    let t4 = t3 + ramp;
    let half_ramp = 0.5 * speed * ramp;
    if t < t1 {
        (speed * t, speed, 0.0)
    } else if t < t2 {
        let x = t - t1;
        let s = 0.5 * speed * (x + ramp / PI * (PI * x / ramp).sin());
        let v = 0.5 * speed * (1.0 + (PI * x / ramp).cos());
        let a = -0.5 * speed * PI / ramp * (PI * x / ramp).sin();
        (speed * t1 + s, v, a)
    } else if t < t3 {
        (speed * t1 + half_ramp, 0.0, 0.0)
    } else if t < t4 {
        let x = t - t3;
        let s = 0.5 * speed * (x - ramp / PI * (PI * x / ramp).sin());
        let v = 0.5 * speed * (1.0 - (PI * x / ramp).cos());
        let a = 0.5 * speed * PI / ramp * (PI * x / ramp).sin();
        (speed * t1 + half_ramp + s, v, a)
    } else {
        (speed * t1 + 2.0 * half_ramp + speed * (t - t4), speed, 0.0)
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    *so3_exp(&Vector3::new(a, 0.0, 0.0)).matrix()
}

fn rot_y(a: f64) -> Matrix3<f64> {
    *so3_exp(&Vector3::new(0.0, a, 0.0)).matrix()
}

fn rot_z(a: f64) -> Matrix3<f64> {
    *so3_exp(&Vector3::new(0.0, 0.0, a)).matrix()
}

impl TrajectorySpec {
    /// Analytic state at time `t`.
    pub fn kinematics(&self, t: f64) -> Kinematics {
        let g = default_gravity();
        // Position, velocity, acceleration, yaw and yaw rate.
        let (p, v, a, yaw, yaw_rate, wobble) = match self.kind {
            TrajectoryKind::Circle { radius, rate } => {
                let phi = rate * t;
                let (s, c) = phi.sin_cos();
                (
                    Vector3::new(radius * c, radius * s, self.height),
                    Vector3::new(-radius * rate * s, radius * rate * c, 0.0),
                    Vector3::new(-radius * rate * rate * c, -radius * rate * rate * s, 0.0),
                    phi + std::f64::consts::FRAC_PI_2,
                    rate,
                    self.wobble,
                )
            }
            TrajectoryKind::Lissajous { amplitude: am, frequency: w } => {
                let p = Vector3::new(
                    am[0] * (w[0] * t).sin(),
                    am[1] * (w[1] * t).sin(),
                    self.height + am[2] * (w[2] * t).sin(),
                );
                let v = Vector3::new(
                    am[0] * w[0] * (w[0] * t).cos(),
                    am[1] * w[1] * (w[1] * t).cos(),
                    am[2] * w[2] * (w[2] * t).cos(),
                );
                let a = Vector3::new(
                    -am[0] * w[0] * w[0] * (w[0] * t).sin(),
                    -am[1] * w[1] * w[1] * (w[1] * t).sin(),
                    -am[2] * w[2] * w[2] * (w[2] * t).sin(),
                );
                let h2 = v.x * v.x + v.y * v.y;
                (p, v, a, v.y.atan2(v.x), (v.x * a.y - v.y * a.x) / h2, self.wobble)
            }
            TrajectoryKind::StopAndGo { radius, speed, stop_at, stop_for, ramp } => {
                let (s, sd, sdd) = stop_and_go_profile(t, speed, stop_at, stop_for, ramp);
                let phi = s / radius;
                let (sn, cs) = phi.sin_cos();
                let tangent = Vector3::new(-sn, cs, 0.0);
                let inward = Vector3::new(-cs, -sn, 0.0);
                (
                    Vector3::new(radius * cs, radius * sn, self.height),
                    tangent * sd,
                    tangent * sdd + inward * (sd * sd / radius),
                    phi + std::f64::consts::FRAC_PI_2,
                    sd / radius,
                    0.0,
                )
            }
        };
        // R = Rz(yaw) Ry(pitch) Rx(roll) with small periodic roll and pitch.
        let (roll, roll_rate) = (wobble * (1.3 * t).sin(), wobble * 1.3 * (1.3 * t).cos());
        let (pitch, pitch_rate) = (wobble * 0.8 * (0.9 * t).sin(), wobble * 0.8 * 0.9 * (0.9 * t).cos());
        let rz = rot_z(yaw);
        let ry = rot_y(pitch);
        let rx = rot_x(roll);
        let r = rz * ry * rx;
        // Body rate: R^T dR/dt = Rx^T Ry^T (yaw' ez^) Ry Rx + Rx^T (pitch' ey^) Rx + roll' ex^.
        let ez = Vector3::z();
        let ey = Vector3::y();
        let ex = Vector3::x();
        let omega = (ry * rx).transpose() * ez * yaw_rate + rx.transpose() * ey * pitch_rate + ex * roll_rate;
        let rotation = Rotation::from_matrix_unchecked(r);
        Kinematics { rotation, velocity: v, position: p, omega, specific_force: r.transpose() * (a - g) }
    }

    /// Analytic states at `t = k dt`, `k = 0..=duration/dt`.
    pub fn generate_ground_truth(&self, dt: f64) -> Vec<(f64, Kinematics)> {
        let n = (self.duration / dt).round() as usize;
        (0..=n).map(|k| (k as f64 * dt, self.kinematics(k as f64 * dt))).collect()
    }
}

/// Noise levels of the synthetic sensors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub imu: ImuNoiseParams,
    /// Keypoint standard deviation in normalized image units.
    pub pixel_sigma: f64,
    /// Standard deviation of bbox edge coordinates in normalized units.
    pub bbox_sigma: f64,
    /// Standard deviation of the initial gyroscope bias.
    pub initial_gyro_bias: f64,
    /// Standard deviation of the initial accelerometer bias.
    pub initial_accel_bias: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            imu: ImuNoiseParams::default(),
            pixel_sigma: 1.0 / 500.0,
            bbox_sigma: 1.0 / 500.0,
            initial_gyro_bias: 1e-3,
            initial_accel_bias: 1e-2,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec {
            imu: ImuNoiseParams { sigma_gyro: 0.0, sigma_accel: 0.0, sigma_gyro_bias: 0.0, sigma_accel_bias: 0.0 },
            pixel_sigma: 0.0,
            bbox_sigma: 0.0,
            initial_gyro_bias: 0.0,
            initial_accel_bias: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSpec {
    /// Half field of view tangents in x and y.
    pub half_fov: [f64; 2],
    pub min_depth: f64,
    pub max_depth: f64,
    /// Camera position in the IMU frame.
    pub translation: [f64; 3],
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec { half_fov: [1.0, 0.75], min_depth: 0.3, max_depth: 25.0, translation: [0.05, 0.0, 0.02] }
    }
}

impl CameraSpec {
    /// Camera looking along the IMU x axis, image x to the IMU's right and
    /// image y downward.
    pub fn extrinsics(&self) -> Pose {
        let r = Matrix3::from_columns(&[-Vector3::y(), -Vector3::z(), Vector3::x()]);
        Pose::new(Rotation::from_matrix_unchecked(r), Vector3::from(self.translation))
    }

    fn in_view(&self, p: &Vector3<f64>) -> bool {
        p.z >= self.min_depth
            && p.z <= self.max_depth
            && (p.x / p.z).abs() <= self.half_fov[0]
            && (p.y / p.z).abs() <= self.half_fov[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub landmarks: usize,
    /// Horizontal distance range of landmarks from the origin.
    pub landmark_radius: [f64; 2],
    pub landmark_height: [f64; 2],
    pub objects: usize,
    /// Horizontal distance of the objects from the origin.
    pub object_radius: f64,
    /// Standard deviation of per-instance shape deformations.
    pub deformation: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            landmarks: 150,
            landmark_radius: [7.0, 11.0],
            landmark_height: [-0.5, 3.0],
            objects: 6,
            object_radius: 6.4,
            deformation: 0.02,
        }
    }
}

/// Everything needed to synthesize a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub seed: u64,
    pub trajectory: TrajectorySpec,
    pub scene: SceneSpec,
    pub camera: CameraSpec,
    pub noise: NoiseSpec,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            seed: 1,
            trajectory: TrajectorySpec::default(),
            scene: SceneSpec::default(),
            camera: CameraSpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

/// A toy-car class with twelve semantic landmarks: four wheel centers,
/// two head lights, two tail lights and four roof corners.
pub fn car_class() -> ObjectClass {
    let mut mean_landmarks = Vec::new();
    for (x, z) in [(0.38, -0.13), (-0.38, -0.13)] {
        for y in [0.26, -0.26] {
            mean_landmarks.push(Vector3::new(x, y, z));
        }
    }
    for x in [0.58, -0.58] {
        for y in [0.17, -0.17] {
            mean_landmarks.push(Vector3::new(x, y, 0.02));
        }
    }
    for x in [0.12, -0.28] {
        for y in [0.17, -0.17] {
            mean_landmarks.push(Vector3::new(x, y, 0.22));
        }
    }
    ObjectClass { semantic_id: 1, name: "car".into(), mean_landmarks, mean_semiaxes: Vector3::new(0.6, 0.3, 0.25) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub track: u64,
    pub class: u32,
    pub instance: ObjectInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub classes: Vec<ObjectClass>,
    pub landmarks: Vec<Vector3<f64>>,
    pub objects: Vec<SceneObject>,
    pub extrinsics: Pose,
}

/// Object tracks are numbered above every landmark track.
pub const OBJECT_TRACK_BASE: u64 = 1_000_000;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

fn gauss3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    let n = normal(sigma);
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Removes the part of a landmark deformation that a small rigid motion of
/// the object would explain, so that the instance pose is the best rigid fit
/// of its deformed shape.
fn non_rigid(cls: &ObjectClass, mut delta: Vec<Vector3<f64>>) -> Vec<Vector3<f64>> {
    // Least squares for (t, w) in delta_l ~ t + w x m_l.
    let mut a = SMatrix::<f64, 6, 6>::zeros();
    let mut b = Vector6::zeros();
    for (m, d) in cls.mean_landmarks.iter().zip(&delta) {
        let mut j = SMatrix::<f64, 3, 6>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&-skew(m));
        a += j.transpose() * j;
        b += j.transpose() * d;
    }
    let Some(x) = a.lu().solve(&b) else {
        return delta;
    };
    let (t, w) = (x.fixed_rows::<3>(0).into_owned(), x.fixed_rows::<3>(3).into_owned());
    for (m, d) in cls.mean_landmarks.iter().zip(delta.iter_mut()) {
        *d -= t + w.cross(m);
    }
    delta
}

/// Landmarks in an annulus and cars spread around a circle facing along it.
pub fn generate_scene(spec: &SimSpec) -> Scene {
    let mut rng = rng_stream(spec.seed, 0);
    let s = &spec.scene;
    let angle = Uniform::new(0.0, std::f64::consts::TAU).expect("range");
    let radius = Uniform::new_inclusive(s.landmark_radius[0], s.landmark_radius[1]).expect("range");
    let height = Uniform::new_inclusive(s.landmark_height[0], s.landmark_height[1]).expect("range");
    let landmarks = (0..s.landmarks)
        .map(|_| {
            let a: f64 = angle.sample(&mut rng);
            let r = radius.sample(&mut rng);
            Vector3::new(r * a.cos(), r * a.sin(), height.sample(&mut rng))
        })
        .collect();
    let cls = car_class();
    let objects = (0..s.objects)
        .map(|k| {
            let a = std::f64::consts::TAU * (k as f64 + 0.3) / s.objects.max(1) as f64;
            let yaw = a + std::f64::consts::FRAC_PI_2 + 0.4 * (k as f64 - 2.0);
            let pose = Pose::new(
                so3_exp(&Vector3::new(0.0, 0.0, yaw)),
                Vector3::new(s.object_radius * a.cos(), s.object_radius * a.sin(), cls.mean_semiaxes.z),
            );
            let instance = ObjectInstance {
                pose,
                delta_landmarks: non_rigid(
                    &cls,
                    (0..cls.num_landmarks()).map(|_| gauss3(&mut rng, s.deformation)).collect(),
                ),
                delta_semiaxes: gauss3(&mut rng, s.deformation),
            };
            SceneObject { track: OBJECT_TRACK_BASE + k as u64, class: cls.semantic_id, instance }
        })
        .collect();
    Scene { classes: vec![cls], landmarks, objects, extrinsics: spec.camera.extrinsics() }
}

/// An inertial sample together with its start time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuRecord {
    pub t: f64,
    #[serde(flatten)]
    pub sample: InertialSample,
}

/// Ground-truth IMU state at a camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRecord {
    pub frame: u64,
    pub t: f64,
    pub state: ImuState,
}

/// Noiseless and noisy inertial streams plus the true state at every
/// sample boundary.
pub struct InertialData {
    pub samples: Vec<ImuRecord>,
    /// True states at `t = k dt`, `k = 0..=samples.len()`.
    pub truth: Vec<ImuState>,
}

/// Samples the analytic rates at interval midpoints, adds bias random walks
/// and white noise, and integrates the noiseless samples in closed form to
/// obtain a ground truth that is exactly consistent with them.
pub fn generate_imu(traj: &TrajectorySpec, noise: &NoiseSpec, seed: u64) -> InertialData {
    let mut rng = rng_stream(seed, 1);
    let dt = traj.imu_dt();
    let n = (traj.duration / dt).round() as usize;
    let g = default_gravity();
    let k0 = traj.kinematics(0.0);
    let mut bg = gauss3(&mut rng, noise.initial_gyro_bias);
    let mut ba = gauss3(&mut rng, noise.initial_accel_bias);
    let mut nominal =
        ImuState { rotation: k0.rotation, velocity: k0.velocity, position: k0.position, ..Default::default() };
    let mut truth = Vec::with_capacity(n + 1);
    truth.push(ImuState { bias_gyro: bg, bias_accel: ba, ..nominal });
    let mut samples = Vec::with_capacity(n);
    let white_g = noise.imu.sigma_gyro / dt.sqrt();
    let white_a = noise.imu.sigma_accel / dt.sqrt();
    let walk_g = noise.imu.sigma_gyro_bias * dt.sqrt();
    let walk_a = noise.imu.sigma_accel_bias * dt.sqrt();
    for k in 0..n {
        let t = k as f64 * dt;
        let mid = traj.kinematics(t + 0.5 * dt);
        let exact = InertialSample::new(mid.omega, mid.specific_force, dt);
        nominal = propagate_mean(&nominal, &exact, &g);
        let omega = mid.omega + bg + gauss3(&mut rng, white_g);
        let accel = mid.specific_force + ba + gauss3(&mut rng, white_a);
        samples.push(ImuRecord { t, sample: InertialSample::new(omega, accel, dt) });
        bg += gauss3(&mut rng, walk_g);
        ba += gauss3(&mut rng, walk_a);
        truth.push(ImuState { bias_gyro: bg, bias_accel: ba, ..nominal });
    }
    InertialData { samples, truth }
}

/// Axis-aligned tangent lines of the image of a posed ellipsoid, as
/// `(x_min, x_max, y_min, y_max)` in normalized coordinates.
pub fn projected_bbox(cam: &Pose, inst: &ObjectInstance, cls: &ObjectClass) -> Result<[f64; 4]> {
    let q = crate::lie::dual_quadric(&inst.semiaxes(cls))?;
    let in_cam: DualQuadric = transform_dual_quadric(&(cam.inverse() * inst.pose), &q);
    let p = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let c = p * in_cam.matrix() * p.transpose();
    // The ellipsoid lies strictly in front of the camera iff C33 < 0 with a
    // positive center depth.
    if !(c[(2, 2)] < 0.0) || in_cam.matrix()[(2, 3)] >= 0.0 {
        return Err(Error::ObjectBehindCamera);
    }
    let roots = |cii: f64, ci3: f64| {
        let disc = (ci3 * ci3 - cii * c[(2, 2)]).max(0.0).sqrt();
        let a = (ci3 + disc) / c[(2, 2)];
        let b = (ci3 - disc) / c[(2, 2)];
        (a.min(b), a.max(b))
    };
    let (x0, x1) = roots(c[(0, 0)], c[(0, 2)]);
    let (y0, y1) = roots(c[(1, 1)], c[(1, 2)]);
    Ok([x0, x1, y0, y1])
}

/// Four bbox lines from edge coordinates, oriented around the box center.
pub fn bbox_lines(b: &[f64; 4]) -> Result<Vec<BBoxLine>> {
    let center = Vector2::new(0.5 * (b[0] + b[1]), 0.5 * (b[2] + b[3]));
    [
        Vector3::new(1.0, 0.0, -b[0]),
        Vector3::new(1.0, 0.0, -b[1]),
        Vector3::new(0.0, 1.0, -b[2]),
        Vector3::new(0.0, 1.0, -b[3]),
    ]
    .into_iter()
    .map(|l| BBoxLine::normalized(l, &center))
    .collect()
}

/// Measurements of one camera frame for the true IMU pose.
pub fn generate_camera_frame(
    frame: u64,
    time: f64,
    imu_pose: &Pose,
    scene: &Scene,
    camera: &CameraSpec,
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> MeasurementFrame {
    let cam = *imu_pose * scene.extrinsics;
    let cam_inv = cam.inverse();
    let px = normal(noise.pixel_sigma);
    let jitter = |z: Vector2<f64>, rng: &mut ChaCha8Rng| Vector2::new(z.x + px.sample(rng), z.y + px.sample(rng));
    let mut keypoints = Vec::new();
    for (i, l) in scene.landmarks.iter().enumerate() {
        let s = cam_inv.transform_point(l);
        if camera.in_view(&s) {
            keypoints.push(KeypointMeasurement { track: i as u64, z: jitter(Vector2::new(s.x / s.z, s.y / s.z), rng) });
        }
    }
    let mut objects = Vec::new();
    for o in &scene.objects {
        let Some(cls) = scene.classes.iter().find(|c| c.semantic_id == o.class) else {
            continue;
        };
        let mut kps = Vec::new();
        for l in 0..cls.num_landmarks() {
            let s = cam_inv.transform_point(&o.instance.landmark_world(cls, l));
            if camera.in_view(&s) {
                kps.push(SemanticKeypoint { landmark: l, z: jitter(Vector2::new(s.x / s.z, s.y / s.z), rng) });
            }
        }
        let mut bbox = Vec::new();
        if let Ok(mut b) = projected_bbox(&cam, &o.instance, cls) {
            let centre = cam_inv.transform_point(&o.instance.pose.translation);
            let inside = centre.z >= camera.min_depth
                && centre.z <= camera.max_depth
                && b[0] >= -camera.half_fov[0]
                && b[1] <= camera.half_fov[0]
                && b[2] >= -camera.half_fov[1]
                && b[3] <= camera.half_fov[1];
            if inside {
                let bn = normal(noise.bbox_sigma);
                for v in b.iter_mut() {
                    *v += bn.sample(rng);
                }
                bbox = bbox_lines(&b).unwrap_or_default();
            }
        }
        if !kps.is_empty() || !bbox.is_empty() {
            objects.push(ObjectMeasurement { track: o.track, class: o.class, keypoints: kps, bbox });
        }
    }
    MeasurementFrame { frame, time, keypoints, objects }
}

/// A complete synthetic dataset.
pub struct Dataset {
    pub scene: Scene,
    pub imu: Vec<ImuRecord>,
    pub frames: Vec<MeasurementFrame>,
    pub truth: Vec<TruthRecord>,
    /// The white-noise and bias-walk levels of the inertial stream.
    pub noise: NoiseSpec,
}

pub fn simulate(spec: &SimSpec) -> Result<Dataset> {
    spec.trajectory.validate()?;
    spec.noise.imu.validate_allow_zero()?;
    let scene = generate_scene(spec);
    let inertial = generate_imu(&spec.trajectory, &spec.noise, spec.seed);
    let mut rng = rng_stream(spec.seed, 2);
    let step = spec.trajectory.samples_per_frame();
    let dt = spec.trajectory.imu_dt();
    let mut frames = Vec::new();
    let mut truth = Vec::new();
    for (frame, k) in (0..inertial.truth.len()).step_by(step).enumerate() {
        let t = k as f64 * dt;
        let state = inertial.truth[k];
        frames.push(generate_camera_frame(frame as u64, t, &state.pose(), &scene, &spec.camera, &spec.noise, &mut rng));
        truth.push(TruthRecord { frame: frame as u64, t, state });
    }
    Ok(Dataset { scene, imu: inertial.samples, frames, truth, noise: spec.noise })
}

/// Position RMSE after aligning the estimate's first pose to the truth's.
pub fn rmse(gt: &[Pose], est: &[Pose]) -> Result<f64> {
    let aligned = align_to_first(gt, est)?;
    let sq: f64 = gt.iter().zip(&aligned).map(|(g, e)| (g.translation - e.translation).norm_squared()).sum();
    Ok((sq / gt.len() as f64).sqrt())
}

/// `T_gt0 T_est0^-1 T_est_k` for every estimate.
pub fn align_to_first(gt: &[Pose], est: &[Pose]) -> Result<Vec<Pose>> {
    if gt.is_empty() || gt.len() != est.len() {
        return Err(Error::InvalidInput(format!("trajectory lengths {} and {}", gt.len(), est.len())));
    }
    let a = gt[0] * est[0].inverse();
    Ok(est.iter().map(|e| a * *e).collect())
}

/// Mean relative translation error in percent over frame pairs `(i, j)`
/// whose path length first reaches each of `lengths`, with start frames
/// taken every `step` frames. `None` if the path is shorter than every
/// length.
pub fn translation_error(gt: &[Pose], est: &[Pose], lengths: &[f64], step: usize) -> Result<Option<f64>> {
    let est = align_to_first(gt, est)?;
    let mut dist = vec![0.0; gt.len()];
    for k in 1..gt.len() {
        dist[k] = dist[k - 1] + (gt[k].translation - gt[k - 1].translation).norm();
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in (0..gt.len()).step_by(step.max(1)) {
        for &len in lengths {
            let Some(j) = (i..gt.len()).find(|&j| dist[j] - dist[i] >= len) else {
                continue;
            };
            let rel_est = est[j].inverse() * est[i];
            let rel_gt = gt[j].inverse() * gt[i];
            let err = (rel_est.inverse() * rel_gt).translation.norm();
            total += err / (dist[j] - dist[i]);
            count += 1;
        }
    }
    Ok((count > 0).then(|| 100.0 * total / count as f64))
}

/// Oriented box with center pose and half extents along its axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub pose: Pose,
    pub half_extents: Vector3<f64>,
}

impl OrientedBox {
    /// The box circumscribing an object's ellipsoid.
    pub fn from_instance(inst: &ObjectInstance, cls: &ObjectClass) -> Self {
        OrientedBox { pose: inst.pose, half_extents: inst.semiaxes(cls) }
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.x * self.half_extents.y * self.half_extents.z
    }

    /// Faces as vertex loops, counter-clockwise seen from outside.
    fn faces(&self) -> Vec<Vec<Vector3<f64>>> {
        let h = self.half_extents;
        let corner = |sx: f64, sy: f64, sz: f64| self.pose.transform_point(&Vector3::new(sx * h.x, sy * h.y, sz * h.z));
        let mut faces = Vec::with_capacity(6);
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                // Two in-face axes ordered so that (u x v) points along sign * axis.
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let (u, v) = if sign > 0.0 { (u, v) } else { (v, u) };
                let at = |a: f64, b: f64| {
                    let mut s = [0.0; 3];
                    s[axis] = sign;
                    s[u] = a;
                    s[v] = b;
                    corner(s[0], s[1], s[2])
                };
                faces.push(vec![at(-1.0, -1.0), at(1.0, -1.0), at(1.0, 1.0), at(-1.0, 1.0)]);
            }
        }
        faces
    }

    /// Half-spaces `n . x <= d` bounding the box.
    fn half_spaces(&self) -> Vec<(Vector3<f64>, f64)> {
        let r = self.pose.r();
        let mut out = Vec::with_capacity(6);
        for i in 0..3 {
            let axis: Vector3<f64> = r.column(i).into();
            for sign in [-1.0, 1.0] {
                let n = axis * sign;
                out.push((n, n.dot(&self.pose.translation) + self.half_extents[i]));
            }
        }
        out
    }
}

/// Signed distance to the plane, snapped to zero within rounding so that
/// coplanar faces count as lying on it.
fn plane_distance(p: &Vector3<f64>, n: &Vector3<f64>, d: f64) -> f64 {
    let s = n.dot(p) - d;
    if s.abs() <= 1e-10 * (1.0 + d.abs()) {
        0.0
    } else {
        s
    }
}

fn clip_polygon(poly: &[Vector3<f64>], n: &Vector3<f64>, d: f64, cut: &mut Vec<Vector3<f64>>) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let da = plane_distance(&a, n, d);
        let db = plane_distance(&b, n, d);
        if da <= 0.0 {
            out.push(a);
        }
        if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
            let p = a + (b - a) * (da / (da - db));
            out.push(p);
            cut.push(p);
        } else if da == 0.0 {
            cut.push(a);
        }
    }
    out
}

/// Clips a closed convex polyhedron to `n . x <= d`, closing the cut with
/// a cap face.
fn clip_polyhedron(faces: Vec<Vec<Vector3<f64>>>, n: &Vector3<f64>, d: f64) -> Vec<Vec<Vector3<f64>>> {
    if faces.iter().flatten().all(|p| plane_distance(p, n, d) <= 0.0) {
        return faces;
    }
    let mut cut = Vec::new();
    let mut out: Vec<Vec<Vector3<f64>>> =
        faces.iter().map(|f| clip_polygon(f, n, d, &mut cut)).filter(|f| f.len() >= 3).collect();
    let mut cap: Vec<Vector3<f64>> = Vec::new();
    for p in cut {
        if cap.iter().all(|q| (q - p).norm() > 1e-12) {
            cap.push(p);
        }
    }
    if cap.len() >= 3 {
        let c = cap.iter().sum::<Vector3<f64>>() / cap.len() as f64;
        let e1 = (cap[0] - c).normalize();
        let e2 = n.cross(&e1);
        cap.sort_by(|a, b| {
            let ta = (a - c).dot(&e2).atan2((a - c).dot(&e1));
            let tb = (b - c).dot(&e2).atan2((b - c).dot(&e1));
            ta.total_cmp(&tb)
        });
        out.push(cap);
    }
    out
}

fn polyhedron_volume(faces: &[Vec<Vector3<f64>>]) -> f64 {
    let mut v = 0.0;
    for f in faces {
        for i in 1..f.len().saturating_sub(1) {
            v += f[0].dot(&f[i].cross(&f[i + 1]));
        }
    }
    v / 6.0
}

/// Intersection over union of two oriented boxes, by clipping one box with
/// the six half-spaces of the other.
pub fn iou3d(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let mut faces = a.faces();
    for (n, d) in b.half_spaces() {
        faces = clip_polyhedron(faces, &n, d);
        if faces.is_empty() {
            return 0.0;
        }
    }
    let inter = polyhedron_volume(&faces).max(0.0);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Object pose for precision / recall matching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectPose {
    pub class: u32,
    pub pose: Pose,
}

/// Precision and recall where an estimate is a true positive if the
/// closest ground-truth object of its class is within `max_translation`
/// and, if given, `max_rotation_deg`.
pub fn precision_recall(
    est: &[ObjectPose],
    gt: &[ObjectPose],
    max_translation: f64,
    max_rotation_deg: Option<f64>,
) -> (f64, f64) {
    let mut tp = 0usize;
    let mut matched = vec![false; gt.len()];
    for e in est {
        let closest = gt.iter().enumerate().filter(|(_, g)| g.class == e.class).min_by(|(_, a), (_, b)| {
            let da = (a.pose.translation - e.pose.translation).norm();
            let db = (b.pose.translation - e.pose.translation).norm();
            da.total_cmp(&db)
        });
        let Some((k, g)) = closest else { continue };
        let dt = (g.pose.translation - e.pose.translation).norm();
        let dr = e.pose.rotation.angle_to(&g.pose.rotation).to_degrees();
        if dt <= max_translation && max_rotation_deg.is_none_or(|m| dr <= m) {
            tp += 1;
            matched[k] = true;
        }
    }
    let precision = if est.is_empty() { 0.0 } else { tp as f64 / est.len() as f64 };
    let recall = if gt.is_empty() { 0.0 } else { matched.iter().filter(|m| **m).count() as f64 / gt.len() as f64 };
    (precision, recall)
}
