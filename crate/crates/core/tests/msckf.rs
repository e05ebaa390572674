mod oracles;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use objvio::imu::{FilterState, ImuState, InertialSample, Matrix15, VEL};
use objvio::lie::{Pose, Rotation};
use objvio::msckf::{
    ekf_update, nullspace_project, qr_compress, retract, stack_geometric_track, zero_velocity_update, EstimatorConfig,
    Event, StackedUpdate, TrackKind, TrackOutcome, TrackResiduals, ZuptConfig, NULLSPACE_TOL,
};
use objvio::pipeline::{self, InitialUncertainty, RunInputs};
use objvio::sim::{self, NoiseSpec, SimSpec, TrajectorySpec};
use oracles::jac::{random_pose, typical_extrinsics};
use oracles::{central_jacobian, Rng};

fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.uniform(-1.0, 1.0))
}

/// A filter state whose window slots hold distinct poses and frames 0..W.
fn windowed_state(rng: &mut Rng, window: usize) -> FilterState {
    let imu =
        ImuState { rotation: rng.rotation(), position: rng.vec3(2.0), velocity: rng.vec3(1.0), ..Default::default() };
    let mut fs = FilterState::new(0.0, imu, &(Matrix15::identity() * 1e-2), window, typical_extrinsics(rng));
    let base = random_pose(rng, 1.0);
    for (k, slot) in fs.window.iter_mut().enumerate() {
        slot.frame = Some(k as u64);
        let step = Pose::new(Rotation::exp(&rng.vec3(0.05)), rng.vec3(0.3));
        slot.pose = base * step;
    }
    // A generic SPD covariance couples every block.
    let a = random_matrix(rng, fs.dim(), fs.dim()) * 0.1;
    fs.covariance = &a * a.transpose() + DMatrix::identity(fs.dim(), fs.dim()) * 1e-3;
    fs
}

#[test]
fn projected_rows_are_orthogonal_to_nuisance() {
    let mut rng = Rng::seeded(31);
    for case in 0..50 {
        let rows = 8 + case % 12;
        let cols = 3 + case % 4;
        let mut j_y = random_matrix(&mut rng, rows, cols);
        // Make some cases rank deficient and badly scaled.
        if case % 3 == 0 {
            let c0 = j_y.column(0).into_owned();
            j_y.set_column(cols - 1, &(c0 * 1e4));
        }
        let tr = TrackResiduals {
            e: DVector::from_fn(rows, |_, _| rng.uniform(-1.0, 1.0)),
            j_x: random_matrix(&mut rng, rows, 9),
            j_y: j_y.clone(),
            v: DMatrix::identity(rows, rows) * 0.04,
        };
        let p = nullspace_project(&tr).unwrap();
        let rank = j_y.clone().svd(false, false).singular_values.iter().filter(|s| **s > 1e-9).count();
        assert_eq!(p.nuisance_rank, rank, "case {case}");
        assert_eq!(p.update.rows(), rows - rank);
        assert!(p.nullspace_residual <= NULLSPACE_TOL);
        assert!((&p.update.v - DMatrix::identity(rows - rank, rows - rank) * 0.04).abs().max() < 1e-15);
    }
}

#[test]
fn projection_equals_explicit_nullspace_basis() {
    // N^T e and N^T J_x are defined up to an orthogonal transform, so compare
    // the Gram matrices, which are invariant.
    let mut rng = Rng::seeded(32);
    let (rows, cols) = (10, 3);
    let j_y = random_matrix(&mut rng, rows, cols);
    let j_x = random_matrix(&mut rng, rows, 6);
    let e = DVector::from_fn(rows, |_, _| rng.uniform(-1.0, 1.0));
    let tr = TrackResiduals { e: e.clone(), j_x: j_x.clone(), j_y: j_y.clone(), v: DMatrix::identity(rows, rows) };
    let p = nullspace_project(&tr).unwrap();
    let svd = j_y.svd(true, false);
    let u = svd.u.unwrap();
    let full = u.clone().columns(0, cols).into_owned();
    let proj = DMatrix::identity(rows, rows) - &full * full.transpose();
    let ref_jtj = j_x.transpose() * &proj * &j_x;
    let ref_jte = j_x.transpose() * &proj * &e;
    let got_jtj = p.update.j.transpose() * &p.update.j;
    let got_jte = p.update.j.transpose() * &p.update.e;
    assert!((ref_jtj - got_jtj).abs().max() < 1e-12);
    assert!((ref_jte - got_jte).abs().max() < 1e-12);
}

#[test]
fn compressed_update_matches_raw_update() {
    let mut rng = Rng::seeded(33);
    let fs = windowed_state(&mut rng, 3);
    let rows = 40;
    let sigmas: Vec<f64> = (0..rows).map(|_| rng.uniform(0.01, 0.2)).collect();
    let upd = StackedUpdate::new(
        DVector::from_fn(rows, |_, _| rng.uniform(-0.05, 0.05)),
        random_matrix(&mut rng, rows, fs.dim()),
        DMatrix::from_diagonal(&DVector::from_iterator(rows, sigmas.iter().map(|s| s * s))),
    )
    .unwrap();
    let compressed = qr_compress(&upd).unwrap();
    assert_eq!(compressed.rows(), fs.dim());
    let (a, ra) = ekf_update(&fs, &upd, None).unwrap();
    let (b, rb) = ekf_update(&fs, &compressed, None).unwrap();
    assert!((&a.covariance - &b.covariance).abs().max() < 1e-12);
    assert!((a.imu.position - b.imu.position).norm() < 1e-12);
    assert!(a.imu.rotation.angle_to(&b.imu.rotation) < 1e-12);
    assert!((a.imu.velocity - b.imu.velocity).norm() < 1e-12);
    // The innovation energy outside the range of J is dropped, so NIS can
    // only shrink.
    assert!(rb.nis <= ra.nis + 1e-9);
}

#[test]
fn geometric_track_jacobian_matches_finite_differences() {
    let mut rng = Rng::seeded(34);
    let fs = windowed_state(&mut rng, 4);
    let cam0 = fs.camera_pose(0);
    let landmark = cam0.transform_point(&Vector3::new(0.2, -0.1, 4.0));
    // Observations in slots 0, 1 and 3 plus one frame that left the window.
    let mut obs: Vec<(u64, Vector2<f64>)> = [0u64, 1, 3]
        .iter()
        .map(|&f| {
            let c = fs.camera_pose(f as usize).inverse().transform_point(&landmark);
            (f, Vector2::new(c.x / c.z, c.y / c.z) + Vector2::new(1e-3, -2e-3))
        })
        .collect();
    obs.push((77, Vector2::zeros()));
    let tr = stack_geometric_track(&fs, &obs, &landmark, 0.01, 0.1).unwrap();
    assert_eq!(tr.e.len(), 6);
    let dim = fs.dim();
    let num_x = central_jacobian(
        |dx| stack_geometric_track(&retract(&fs, dx), &obs, &landmark, 0.01, 0.1).unwrap().e,
        dim,
        1e-6,
    );
    let num_y = central_jacobian(
        |dy| {
            let l = landmark + Vector3::new(dy[0], dy[1], dy[2]);
            stack_geometric_track(&fs, &obs, &l, 0.01, 0.1).unwrap().e
        },
        3,
        1e-6,
    );
    assert!((&tr.j_x - num_x).abs().max() < 1e-6);
    assert!((&tr.j_y - num_y).abs().max() < 1e-6);
    // Slot 2 was never observed, so its columns stay zero.
    assert_eq!(tr.j_x.columns(FilterState::slot_offset(2), 6).abs().max(), 0.0);
}

#[test]
fn zero_velocity_update_pulls_velocity_to_zero() {
    let imu = ImuState { velocity: Vector3::new(0.05, -0.03, 0.02), ..Default::default() };
    let mut cov = Matrix15::identity() * 1e-4;
    for i in 0..3 {
        cov[(VEL + i, VEL + i)] = 1e-2;
    }
    let fs = FilterState::new(0.0, imu, &cov, 2, Pose::identity());
    let g = fs.gravity;
    let samples = vec![InertialSample::new(Vector3::zeros(), -g, 0.005); 40];
    let out = zero_velocity_update(&fs, &samples, &EstimatorConfig::default().noise, &ZuptConfig::default()).unwrap();
    assert!(out.imu.velocity.norm() < 0.1 * fs.imu.velocity.norm());
    for i in 0..3 {
        assert!(out.covariance[(VEL + i, VEL + i)] < 1e-3);
    }
}

#[test]
fn estimator_lifecycle_on_short_noiseless_run() {
    let spec = SimSpec {
        trajectory: TrajectorySpec { duration: 12.0, ..Default::default() },
        noise: NoiseSpec::noiseless(),
        ..Default::default()
    };
    let data = sim::simulate(&spec).unwrap();
    let t0 = data.truth[0].state;
    let inputs = RunInputs {
        classes: &data.scene.classes,
        extrinsics: data.scene.extrinsics,
        imu: &data.imu,
        frames: &data.frames,
        initial: pipeline::initial_state(&t0.pose(), t0.velocity),
        initial_uncertainty: InitialUncertainty::default(),
    };
    let mut seen = 0;
    let out = pipeline::run(&inputs, &EstimatorConfig::default(), |k, est| {
        assert_eq!(k, seen);
        seen += 1;
        assert!(est.fs.check_psd(1e-9).is_ok());
    })
    .unwrap();
    assert_eq!(out.trajectory.len(), data.frames.len());
    let closed = |kind: TrackKind| {
        out.events
            .iter()
            .filter(
                |e| matches!(e, Event::TrackClosed { kind: k, outcome: TrackOutcome::Used { .. }, .. } if *k == kind),
            )
            .count()
    };
    assert!(closed(TrackKind::Geometric) > 50);
    assert!(closed(TrackKind::Object) > 0);
    assert!(out.events.iter().any(|e| matches!(e, Event::ObjectMapped { .. })));
    assert!(out.estimator.objects().count() > 0);
    assert!(out.estimator.stats.updates > 0);
    let last = out.trajectory.last().unwrap();
    let truth = data.truth.last().unwrap();
    assert!((last.state.position - truth.state.position).norm() < 1e-4);
}
