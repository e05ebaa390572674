mod oracles;

use nalgebra::{Matrix3x4, Vector3};
use objvio::error::Error;
use objvio::imu::propagate_mean;
use objvio::lie::{default_gravity, dual_quadric, transform_dual_quadric, Pose, Rotation};
use objvio::residuals::ObjectInstance;
use objvio::sim::{
    self, car_class, generate_camera_frame, generate_imu, generate_scene, projected_bbox, CameraSpec, NoiseSpec,
    ObjectPose, SimSpec, TrajectoryKind, TrajectorySpec,
};
use oracles::Rng;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn noiseless_samples_integrate_to_the_truth() {
    let traj = TrajectorySpec::default();
    let data = generate_imu(&traj, &NoiseSpec::noiseless(), 5);
    let g = default_gravity();
    let mut s = data.truth[0];
    for (k, r) in data.samples.iter().enumerate() {
        s = propagate_mean(&s, &r.sample, &g);
        let t = &data.truth[k + 1];
        assert!((s.position - t.position).norm() < 1e-9);
    }
    // The truth also tracks the analytic trajectory to midpoint accuracy.
    let end = traj.kinematics(traj.duration);
    let last = data.truth.last().unwrap();
    assert!((last.position - end.position).norm() < 1e-3);
    assert!(last.rotation.angle_to(&end.rotation) < 1e-4);
}

#[test]
fn velocity_is_the_derivative_of_position_for_every_kind() {
    let kinds = [
        TrajectoryKind::Circle { radius: 5.0, rate: 0.2 },
        TrajectoryKind::Lissajous { amplitude: [4.0, 3.0, 0.5], frequency: [0.3, 0.4, 0.5] },
        TrajectoryKind::StopAndGo { radius: 5.0, speed: 1.0, stop_at: 3.0, stop_for: 2.0, ramp: 1.0 },
    ];
    let h = 1e-5;
    for kind in kinds {
        let traj = TrajectorySpec { kind, duration: 10.0, ..Default::default() };
        for i in 1..40 {
            let t = 0.25 * i as f64;
            let fd = (traj.kinematics(t + h).position - traj.kinematics(t - h).position) / (2.0 * h);
            assert!((fd - traj.kinematics(t).velocity).norm() < 1e-6, "{kind:?} at {t}");
        }
    }
}

#[test]
fn bias_random_walk_variance_grows_linearly() {
    let mut noise = NoiseSpec::noiseless();
    noise.imu.sigma_gyro_bias = 1e-3;
    noise.imu.sigma_accel_bias = 2e-3;
    let traj = TrajectorySpec { duration: 4.0, ..Default::default() };
    let runs = 600;
    let half = generate_imu(&traj, &noise, 0).truth.len() / 2;
    let mut sums = [[0.0; 2]; 2];
    for seed in 0..runs {
        let truth = generate_imu(&traj, &noise, seed).truth;
        for (slot, k) in [half, truth.len() - 1].into_iter().enumerate() {
            sums[slot][0] += truth[k].bias_gyro.norm_squared();
            sums[slot][1] += truth[k].bias_accel.norm_squared();
        }
    }
    let n = (3 * runs) as f64;
    for (slot, t) in [0.5 * traj.duration, traj.duration].into_iter().enumerate() {
        let expect_g = noise.imu.sigma_gyro_bias.powi(2) * t;
        let expect_a = noise.imu.sigma_accel_bias.powi(2) * t;
        let got_g = sums[slot][0] / n;
        let got_a = sums[slot][1] / n;
        assert!((got_g / expect_g - 1.0).abs() < 0.1, "gyro walk variance {got_g} vs {expect_g}");
        assert!((got_a / expect_a - 1.0).abs() < 0.1, "accel walk variance {got_a} vs {expect_a}");
    }
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let spec = SimSpec { trajectory: TrajectorySpec { duration: 5.0, ..Default::default() }, ..Default::default() };
    let a = sim::simulate(&spec).unwrap();
    let b = sim::simulate(&spec).unwrap();
    assert_eq!(a.imu, b.imu);
    assert_eq!(a.frames, b.frames);
    let c = sim::simulate(&SimSpec { seed: spec.seed + 1, ..spec }).unwrap();
    assert_ne!(a.imu, c.imu);
}

#[test]
fn bbox_edges_are_tangent_to_the_projected_ellipsoid() {
    let mut rng = Rng::seeded(61);
    let cls = car_class();
    let p = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    for _ in 0..50 {
        let pose = Pose::new(
            rng.rotation(),
            Vector3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(4.0, 10.0)),
        );
        let inst = ObjectInstance::undeformed(&cls, pose);
        let b = projected_bbox(&Pose::identity(), &inst, &cls).unwrap();
        let q = transform_dual_quadric(&pose, &dual_quadric(&inst.semiaxes(&cls)).unwrap());
        let c = p * q.matrix() * p.transpose();
        let c = c / c.abs().max();
        for l in [
            Vector3::new(1.0, 0.0, -b[0]),
            Vector3::new(1.0, 0.0, -b[1]),
            Vector3::new(0.0, 1.0, -b[2]),
            Vector3::new(0.0, 1.0, -b[3]),
        ] {
            assert!((l.transpose() * c * l)[0].abs() < 1e-10);
        }
        assert!(b[0] < b[1] && b[2] < b[3]);
    }
}

#[test]
fn objects_behind_or_straddling_the_camera_are_omitted() {
    let cls = car_class();
    let behind = ObjectInstance::undeformed(&cls, Pose::from_translation(Vector3::new(0.0, 0.0, -5.0)));
    assert_eq!(projected_bbox(&Pose::identity(), &behind, &cls).unwrap_err(), Error::ObjectBehindCamera);
    let straddling = ObjectInstance::undeformed(&cls, Pose::from_translation(Vector3::new(0.0, 0.0, 0.1)));
    assert_eq!(projected_bbox(&Pose::identity(), &straddling, &cls).unwrap_err(), Error::ObjectBehindCamera);

    // An IMU far outside the scene and looking away from it sees nothing.
    let spec = SimSpec::default();
    let scene = generate_scene(&spec);
    let away = Pose::new(Rotation::identity(), Vector3::new(100.0, 0.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frame = generate_camera_frame(0, 0.0, &away, &scene, &CameraSpec::default(), &NoiseSpec::noiseless(), &mut rng);
    assert!(frame.objects.is_empty());
    assert!(frame.keypoints.is_empty());
}

#[test]
fn rmse_and_alignment_hand_case() {
    let gt = [Pose::identity(), Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))];
    let est = [Pose::identity(), Pose::from_translation(Vector3::new(1.0, 1.0, 0.0))];
    assert!((sim::rmse(&gt, &est).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    // A rigid offset of the whole estimate is removed by the alignment.
    let offset = Pose::new(Rotation::exp(&Vector3::new(0.1, -0.2, 0.3)), Vector3::new(3.0, -1.0, 2.0));
    let moved: Vec<Pose> = gt.iter().map(|p| offset * *p).collect();
    assert!(sim::rmse(&gt, &moved).unwrap() < 1e-14);
    assert!(sim::rmse(&gt, &est[..1]).is_err());
}

#[test]
fn translation_error_of_a_rigidly_moved_copy_is_zero() {
    let traj = TrajectorySpec::default();
    let gt: Vec<Pose> = (0..600)
        .map(|k| {
            let s = traj.kinematics(0.1 * k as f64);
            Pose::new(s.rotation, s.position)
        })
        .collect();
    let offset = Pose::new(Rotation::exp(&Vector3::new(0.3, 0.0, -0.1)), Vector3::new(1.0, 2.0, 3.0));
    let est: Vec<Pose> = gt.iter().map(|p| offset * *p).collect();
    let te = sim::translation_error(&gt, &est, &[10.0, 20.0], 10).unwrap().unwrap();
    assert!(te < 1e-10);
    // A 1% scale error gives 1% of each chord, and a chord is never longer
    // than its arc.
    let scaled: Vec<Pose> = gt.iter().map(|p| Pose::new(p.rotation, p.translation * 1.01)).collect();
    let te = sim::translation_error(&gt, &scaled, &[10.0, 20.0], 10).unwrap().unwrap();
    assert!(te > 0.5 && te <= 1.0 + 1e-9, "{te}");
    assert!(sim::translation_error(&gt[..5], &est[..5], &[10.0], 1).unwrap().is_none());
}

#[test]
fn precision_recall_hand_case() {
    let at = |x: f64, class: u32| ObjectPose { class, pose: Pose::from_translation(Vector3::new(x, 0.0, 0.0)) };
    let gt = [at(0.0, 1), at(10.0, 1), at(20.0, 2)];
    let est = [at(0.3, 1), at(12.0, 1), at(20.1, 1)];
    // Only the first estimate is within 1 m of a same-class object.
    let (p, r) = sim::precision_recall(&est, &gt, 1.0, None);
    assert!((p - 1.0 / 3.0).abs() < 1e-15);
    assert!((r - 1.0 / 3.0).abs() < 1e-15);
    let (p, r) = sim::precision_recall(&est, &gt, 2.5, None);
    assert!((p - 2.0 / 3.0).abs() < 1e-15 && (r - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn iou_of_rotated_boxes_with_shared_faces() {
    let mut rng = Rng::seeded(62);
    for _ in 0..200 {
        let pose = Pose::new(rng.rotation(), rng.vec3(10.0));
        let h = Vector3::new(rng.uniform(0.2, 3.0), rng.uniform(0.2, 3.0), rng.uniform(0.2, 3.0));
        let a = sim::OrientedBox { pose, half_extents: h };
        assert!((sim::iou3d(&a, &a) - 1.0).abs() < 1e-9);
        // Shifted by one half extent along a box axis: overlap 1/2, IoU 1/3.
        let axis = rng.0.random_range(0..3);
        let shift = pose.rotation * (Vector3::ith(axis, 1.0) * h[axis]);
        let b = sim::OrientedBox { pose: Pose::new(pose.rotation, pose.translation + shift), half_extents: h };
        assert!((sim::iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-9);
    }
}
