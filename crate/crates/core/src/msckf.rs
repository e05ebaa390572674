//! Sliding-window EKF update: per-track residual stacking, left null-space
//! projection, QR compression, the Joseph-form update, zero-velocity
//! updates, and the estimator that drives track lifecycles.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::imu::{
    augment_window, predict, FilterState, ImuNoiseParams, ImuState, InertialSample, Matrix15, IMU_DIM, POS, THETA, VEL,
};
use crate::lie::{perturb_imu_pose, Pose, Vector6};
use crate::object::{
    init_object_pose_ellipsoid, init_object_pose_keypoints, optimize_landmark, optimize_object, triangulate_landmark,
    usable_observations, world_plane, LmConfig, ObjectObservation, ResidualModel, SemanticKeypoint,
};
use crate::residuals::{
    bbox_error, bbox_error_quadratic, geometric_error, semantic_error, zero_velocity_error, BBoxLine, ObjectClass,
    ObjectInstance,
};

/// Residuals of one track before nuisance elimination.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackResiduals {
    pub e: DVector<f64>,
    /// Jacobian with respect to the full filter error state.
    pub j_x: DMatrix<f64>,
    /// Jacobian with respect to the nuisance (landmark or object parameters).
    pub j_y: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

/// A measurement block expressed in the filter error state only.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedUpdate {
    pub e: DVector<f64>,
    pub j: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl StackedUpdate {
    pub fn new(e: DVector<f64>, j: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if j.nrows() != e.len() || v.nrows() != e.len() || v.ncols() != e.len() {
            return Err(Error::InvalidInput("stacked update dimensions disagree".into()));
        }
        Ok(StackedUpdate { e, j, v })
    }

    pub fn rows(&self) -> usize {
        self.e.len()
    }

    /// Stacks blocks vertically with a block-diagonal noise covariance.
    pub fn concat(blocks: &[StackedUpdate]) -> Option<StackedUpdate> {
        let first = blocks.first()?;
        let cols = first.j.ncols();
        let rows: usize = blocks.iter().map(|b| b.rows()).sum();
        let mut e = DVector::zeros(rows);
        let mut j = DMatrix::zeros(rows, cols);
        let mut v = DMatrix::zeros(rows, rows);
        let mut at = 0;
        for b in blocks {
            let n = b.rows();
            e.rows_mut(at, n).copy_from(&b.e);
            j.view_mut((at, 0), (n, cols)).copy_from(&b.j);
            v.view_mut((at, at), (n, n)).copy_from(&b.v);
            at += n;
        }
        Some(StackedUpdate { e, j, v })
    }
}

/// Places a 6-column pose Jacobian block into the column slot of window
/// slot `k`.
fn place_slot(j_x: &mut DMatrix<f64>, row: usize, k: usize, block: &[f64], rows: usize) {
    let off = FilterState::slot_offset(k);
    let b = DMatrix::from_column_slice(rows, 6, block);
    j_x.view_mut((row, off), (rows, 6)).copy_from(&b);
}

/// Geometric-keypoint residuals of one landmark over the window.
/// Observations whose frame left the window are dropped.
pub fn stack_geometric_track(
    fs: &FilterState,
    obs: &[(u64, Vector2<f64>)],
    landmark: &Vector3<f64>,
    sigma: f64,
    depth_min: f64,
) -> Result<TrackResiduals> {
    let in_window: Vec<(usize, &Vector2<f64>)> =
        obs.iter().filter_map(|(f, z)| fs.slot_of_frame(*f).map(|k| (k, z))).collect();
    let rows = 2 * in_window.len();
    let mut e = DVector::zeros(rows);
    let mut j_x = DMatrix::zeros(rows, fs.dim());
    let mut j_y = DMatrix::zeros(rows, 3);
    for (i, (k, z)) in in_window.iter().enumerate() {
        let g = geometric_error(&fs.window[*k].pose, &fs.extrinsics, landmark, z, depth_min)?;
        e.rows_mut(2 * i, 2).copy_from(&g.error);
        place_slot(&mut j_x, 2 * i, *k, g.jac_imu.as_slice(), 2);
        j_y.view_mut((2 * i, 0), (2, 3)).copy_from(&g.jac_landmark);
    }
    Ok(TrackResiduals { e, j_x, j_y, v: DMatrix::identity(rows, rows) * (sigma * sigma) })
}

/// Semantic-keypoint and bbox residuals of one object over the window.
pub fn stack_object_track(
    fs: &FilterState,
    obs: &[(u64, ObjectObservation)],
    cls: &ObjectClass,
    inst: &ObjectInstance,
    model: &ResidualModel,
) -> Result<TrackResiduals> {
    let mut blocks: Vec<ViewBlock> = Vec::new();
    let kp_var = model.keypoint_sigma * model.keypoint_sigma;
    let bb_var = model.bbox_sigma * model.bbox_sigma;
    for (frame, o) in obs {
        let Some(k) = fs.slot_of_frame(*frame) else {
            continue;
        };
        let pose = &fs.window[k].pose;
        for kp in &o.keypoints {
            let r = semantic_error(pose, &fs.extrinsics, cls, inst, kp.landmark, &kp.z, model.depth_min)?;
            blocks.push((kp_var, k, r.error, r.jac_imu, r.jac_obj));
        }
        for line in &o.bbox {
            let r = if model.quadratic_bbox {
                bbox_error_quadratic(pose, &fs.extrinsics, cls, inst, line)?
            } else {
                bbox_error(pose, &fs.extrinsics, cls, inst, line)?
            };
            blocks.push((bb_var, k, r.error, r.jac_imu, r.jac_obj));
        }
    }
    let rows: usize = blocks.iter().map(|b| b.2.len()).sum();
    let dim = cls.param_dim();
    let mut e = DVector::zeros(rows);
    let mut j_x = DMatrix::zeros(rows, fs.dim());
    let mut j_y = DMatrix::zeros(rows, dim);
    let mut v = DMatrix::zeros(rows, rows);
    let mut at = 0;
    for (var, k, err, jac_imu, jac_obj) in blocks {
        let n = err.len();
        e.rows_mut(at, n).copy_from(&err);
        let off = FilterState::slot_offset(k);
        j_x.view_mut((at, off), (n, 6)).copy_from(&jac_imu);
        j_y.view_mut((at, 0), (n, dim)).copy_from(&jac_obj);
        for i in 0..n {
            v[(at + i, at + i)] = var;
        }
        at += n;
    }
    Ok(TrackResiduals { e, j_x, j_y, v })
}

/// Householder vector `v` (with `v[0] = 1`) and `beta` such that
/// `(I - beta v v^T) x = (alpha, 0, ..., 0)`.
fn householder(x: &DVector<f64>) -> (DVector<f64>, f64) {
    let sigma: f64 = x.rows(1, x.len() - 1).norm_squared();
    let mut v = x.clone();
    v[0] = 1.0;
    if sigma == 0.0 {
        return (v, 0.0);
    }
    let mu = (x[0] * x[0] + sigma).sqrt();
    let v0 = if x[0] <= 0.0 { x[0] - mu } else { -sigma / (x[0] + mu) };
    let beta = 2.0 * v0 * v0 / (sigma + v0 * v0);
    for i in 1..x.len() {
        v[i] = x[i] / v0;
    }
    (v, beta)
}

/// Applies `I - beta v v^T` to rows `k..` of `m` from the left.
fn reflect_rows(m: &mut DMatrix<f64>, k: usize, v: &DVector<f64>, beta: f64) {
    if beta == 0.0 {
        return;
    }
    let n = v.len();
    let cols = m.ncols();
    let mut sub = m.view_mut((k, 0), (n, cols));
    let w = sub.tr_mul(v) * beta;
    sub.ger(-1.0, v, &w, 1.0);
}

/// Result of a null-space projection, with the size of `N^T J_y` that was
/// discarded.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub update: StackedUpdate,
    /// `max |N^T J_y|` after projection.
    pub nullspace_residual: f64,
    pub nuisance_rank: usize,
}

/// Column norm below which a remaining nuisance column counts as zero.
pub const NULLSPACE_TOL: f64 = 1e-11;

/// Projects a track onto the left null space of its nuisance Jacobian,
/// using Householder reflections with column pivoting (the full orthogonal
/// factor is applied implicitly). Reflections continue until every
/// remaining column of `J_y` is below [`NULLSPACE_TOL`], so the kept rows
/// satisfy `|N^T J_y| <= NULLSPACE_TOL` whatever the conditioning.
pub fn nullspace_project(tr: &TrackResiduals) -> Result<Projection> {
    let rows = tr.e.len();
    let mut a = tr.j_y.clone();
    let mut e = DMatrix::from_column_slice(rows, 1, tr.e.as_slice());
    let mut jx = tr.j_x.clone();
    let mut v = tr.v.clone();
    let cols = a.ncols();
    // An isotropic V stays isotropic under orthogonal transforms.
    let iso = tr.v[(0, 0)];
    let isotropic = rows > 0 && (0..rows).all(|i| (0..rows).all(|j| tr.v[(i, j)] == if i == j { iso } else { 0.0 }));
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut rank = 0;
    while rank < cols.min(rows) {
        let k = rank;
        // Pivot the remaining column of largest norm into place.
        let (mut best, mut best_norm) = (k, -1.0);
        for (c, &col) in perm.iter().enumerate().skip(k) {
            let nrm = a.view((k, col), (rows - k, 1)).norm_squared();
            if nrm > best_norm {
                best = c;
                best_norm = nrm;
            }
        }
        if best_norm.sqrt() <= NULLSPACE_TOL {
            break;
        }
        perm.swap(k, best);
        let x = a.view((k, perm[k]), (rows - k, 1)).column(0).into_owned();
        let (hv, beta) = householder(&x);
        reflect_rows(&mut a, k, &hv, beta);
        reflect_rows(&mut e, k, &hv, beta);
        reflect_rows(&mut jx, k, &hv, beta);
        if !isotropic {
            reflect_rows(&mut v, k, &hv, beta);
            let mut vt = v.transpose();
            reflect_rows(&mut vt, k, &hv, beta);
            v = vt.transpose();
        }
        rank += 1;
    }
    if rows <= rank {
        return Err(Error::NoNullspace);
    }
    let keep = rows - rank;
    let residual = if cols > rank { a.view((rank, 0), (keep, cols)).abs().max() } else { 0.0 };
    let pv =
        if isotropic { DMatrix::identity(keep, keep) * iso } else { v.view((rank, rank), (keep, keep)).into_owned() };
    let update = StackedUpdate {
        e: e.view((rank, 0), (keep, 1)).column(0).into_owned(),
        j: jx.view((rank, 0), (keep, jx.ncols())).into_owned(),
        v: (&pv + pv.transpose()) * 0.5,
    };
    Ok(Projection { update, nullspace_residual: residual, nuisance_rank: rank })
}

/// Premultiplies a block by `L^-1` where `V = L L^T`, so that its noise
/// covariance becomes the identity. Diagonal covariances are scaled row by
/// row.
pub fn whiten(upd: &StackedUpdate) -> Result<StackedUpdate> {
    let n = upd.rows();
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || upd.v[(i, j)] == 0.0));
    if diagonal {
        let mut e = upd.e.clone();
        let mut j = upd.j.clone();
        for i in 0..n {
            let var = upd.v[(i, i)];
            if !(var > 0.0) {
                return Err(Error::CovarianceNotPsd { min_eigenvalue: var });
            }
            let w = var.sqrt().recip();
            e[i] *= w;
            j.row_mut(i).scale_mut(w);
        }
        return Ok(StackedUpdate { e, j, v: DMatrix::identity(n, n) });
    }
    let chol = upd.v.clone().cholesky().ok_or(Error::CovarianceNotPsd { min_eigenvalue: f64::NAN })?;
    let l = chol.l();
    let e = l.solve_lower_triangular(&upd.e).expect("triangular solve");
    let j = l.solve_lower_triangular(&upd.j).expect("triangular solve");
    Ok(StackedUpdate { e, j, v: DMatrix::identity(n, n) })
}

/// Whitens the block and replaces a tall Jacobian by its triangular factor.
/// Leaves the block unchanged when it is not taller than wide.
pub fn qr_compress(upd: &StackedUpdate) -> Result<StackedUpdate> {
    let (rows, cols) = upd.j.shape();
    if rows <= cols {
        return Ok(upd.clone());
    }
    let w = whiten(upd)?;
    let qr = w.j.qr();
    let q = qr.q();
    let r = qr.r();
    Ok(StackedUpdate { e: q.tr_mul(&w.e), j: r, v: DMatrix::identity(cols, cols) })
}

/// Applies an error-state correction to the mean: rotations by the right
/// exponential, everything else additively.
pub fn retract(fs: &FilterState, dx: &DVector<f64>) -> FilterState {
    let mut out = fs.clone();
    out.imu = fs.imu.oplus(&dx.as_slice()[..IMU_DIM]);
    for (k, slot) in out.window.iter_mut().enumerate() {
        let off = FilterState::slot_offset(k);
        let d = Vector6::from_fn(|i, _| dx[off + i]);
        slot.pose = perturb_imu_pose(&slot.pose, &d);
    }
    out
}

/// Outcome diagnostics of an EKF update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateReport {
    /// Normalized innovation squared `e^T S^-1 e`.
    pub nis: f64,
    pub rows: usize,
}

/// Joseph-form EKF update with the innovation `e = h(x_hat) - z`. With
/// `gate` set to a probability, the update is rejected when the normalized
/// innovation exceeds that chi-square quantile.
pub fn ekf_update(fs: &FilterState, upd: &StackedUpdate, gate: Option<f64>) -> Result<(FilterState, UpdateReport)> {
    let sigma = &fs.covariance;
    let pjt = sigma * upd.j.transpose();
    let s = &upd.j * &pjt + &upd.v;
    let s = (&s + s.transpose()) * 0.5;
    let chol = s.cholesky().ok_or(Error::CovarianceNotPsd { min_eigenvalue: f64::NAN })?;
    let nis = upd.e.dot(&chol.solve(&upd.e));
    if let Some(p) = gate {
        let dist = ChiSquared::new(upd.rows() as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
        if nis > dist.inverse_cdf(p) {
            return Err(Error::InnovationGateFailed);
        }
    }
    // K = Sigma J^T S^-1.
    let k = chol.solve(&pjt.transpose()).transpose();
    let dx = -(&k * &upd.e);
    let mut out = retract(fs, &dx);
    let n = fs.dim();
    let ikj = DMatrix::identity(n, n) - &k * &upd.j;
    out.covariance = &ikj * sigma * ikj.transpose() + &k * &upd.v * k.transpose();
    out.symmetrize();
    Ok((out, UpdateReport { nis, rows: upd.rows() }))
}

/// Zero-velocity detection and pseudo-measurement settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZuptConfig {
    pub enabled: bool,
    /// Length of the detection window in seconds.
    pub window: f64,
    /// Largest bias-corrected angular rate of a static sample, rad/s.
    pub gyro_threshold: f64,
    /// Largest `|R (a - b_a) + g|` of a static sample, m/s^2.
    pub accel_threshold: f64,
    /// The velocity estimate must be below this for a detection, m/s.
    pub velocity_threshold: f64,
    /// Standard deviation of the zero-velocity rows, m/s.
    pub velocity_sigma: f64,
    /// Noise floor of the angular-rate rows, rad/s. A detected window may
    /// still contain motion up to the thresholds.
    pub gyro_sigma: f64,
    /// Noise floor of the specific-force rows, m/s^2.
    pub accel_sigma: f64,
}

impl Default for ZuptConfig {
    fn default() -> Self {
        ZuptConfig {
            enabled: true,
            window: 0.2,
            gyro_threshold: 0.1,
            accel_threshold: 0.5,
            velocity_threshold: 0.2,
            velocity_sigma: 0.01,
            gyro_sigma: 0.01,
            accel_sigma: 0.1,
        }
    }
}

/// Recent inertial samples, for static detection.
#[derive(Clone, Debug, Default)]
pub struct ZuptDetector {
    samples: VecDeque<(f64, InertialSample)>,
    /// Samples since the last zero-velocity update.
    fresh: Vec<InertialSample>,
}

/// Fewest samples the detector decides on.
pub const ZUPT_MIN_SAMPLES: usize = 5;

impl ZuptDetector {
    pub fn push(&mut self, t: f64, z: InertialSample, window: f64) {
        self.samples.push_back((t, z));
        self.fresh.push(z);
        while let Some(&(t0, _)) = self.samples.front() {
            if t - t0 > window {
                self.samples.pop_front();
            } else {
                break;
            }
        }
    }

    /// Whether every sample in the window looks static under the current
    /// estimate and the estimated speed is small.
    pub fn is_static(&self, state: &ImuState, g: &Vector3<f64>, cfg: &ZuptConfig) -> bool {
        if self.samples.len() < ZUPT_MIN_SAMPLES || state.velocity.norm() >= cfg.velocity_threshold {
            return false;
        }
        self.samples.iter().all(|(_, z)| {
            let gyro = (z.omega - state.bias_gyro).norm();
            let accel = (state.rotation * (z.accel - state.bias_accel) + g).norm();
            gyro < cfg.gyro_threshold && accel < cfg.accel_threshold
        })
    }

    /// Takes the samples gathered since the previous call.
    pub fn take_fresh(&mut self) -> Vec<InertialSample> {
        std::mem::take(&mut self.fresh)
    }
}

/// Pseudo-measurement update for a static platform. The inertial rows use
/// the mean of `samples` with the averaged white noise, floored by the
/// configured sigmas; three further rows assert zero velocity.
pub fn zero_velocity_update(
    fs: &FilterState,
    samples: &[InertialSample],
    noise: &ImuNoiseParams,
    cfg: &ZuptConfig,
) -> Result<FilterState> {
    if samples.is_empty() {
        return Err(Error::InsufficientObservations("no inertial samples for zero-velocity update".into()));
    }
    let n = samples.len() as f64;
    let span: f64 = samples.iter().map(|z| z.dt).sum();
    let mean = InertialSample::new(
        samples.iter().map(|z| z.omega).sum::<Vector3<f64>>() / n,
        samples.iter().map(|z| z.accel).sum::<Vector3<f64>>() / n,
        span / n,
    );
    let (ze, zj) = zero_velocity_error(&fs.imu, &mean, &fs.gravity);
    let dim = fs.dim();
    let mut e = DVector::zeros(9);
    let mut j = DMatrix::zeros(9, dim);
    let mut v = DMatrix::zeros(9, 9);
    e.rows_mut(0, 6).copy_from(&ze);
    j.view_mut((0, 0), (6, IMU_DIM)).copy_from(&zj);
    e.rows_mut(6, 3).copy_from(&fs.imu.velocity);
    for i in 0..3 {
        j[(6 + i, VEL + i)] = 1.0;
        v[(i, i)] = (noise.sigma_gyro * noise.sigma_gyro / span).max(cfg.gyro_sigma * cfg.gyro_sigma);
        v[(3 + i, 3 + i)] = (noise.sigma_accel * noise.sigma_accel / span).max(cfg.accel_sigma * cfg.accel_sigma);
        v[(6 + i, 6 + i)] = cfg.velocity_sigma * cfg.velocity_sigma;
    }
    let (out, _) = ekf_update(fs, &StackedUpdate { e, j, v }, None)?;
    Ok(out)
}

/// Normalized estimation error squared of the IMU pose `(theta, p)`.
pub fn pose_nees(fs: &FilterState, truth: &Pose) -> f64 {
    let theta = (fs.imu.rotation.inverse() * truth.rotation).log();
    let dp = truth.translation - fs.imu.position;
    let err = Vector6::new(theta.x, theta.y, theta.z, dp.x, dp.y, dp.z);
    let idx = [THETA, THETA + 1, THETA + 2, POS, POS + 1, POS + 2];
    let cov = nalgebra::Matrix6::from_fn(|i, j| fs.covariance[(idx[i], idx[j])]);
    match cov.cholesky() {
        Some(c) => err.dot(&c.solve(&err)),
        None => f64::INFINITY,
    }
}

/// A geometric keypoint observation with its track id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointMeasurement {
    pub track: u64,
    pub z: Vector2<f64>,
}

/// One detected object in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeasurement {
    pub track: u64,
    pub class: u32,
    pub keypoints: Vec<SemanticKeypoint>,
    pub bbox: Vec<BBoxLine>,
}

impl ObjectMeasurement {
    pub fn observation(&self) -> ObjectObservation {
        ObjectObservation { keypoints: self.keypoints.clone(), bbox: self.bbox.clone() }
    }
}

/// Everything the camera front-end reports at one timestamp.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFrame {
    pub frame: u64,
    pub time: f64,
    pub keypoints: Vec<KeypointMeasurement>,
    pub objects: Vec<ObjectMeasurement>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Number of cloned poses in the sliding window.
    pub window: usize,
    pub noise: ImuNoiseParams,
    pub residuals: ResidualModel,
    pub lm: LmConfig,
    pub zupt: ZuptConfig,
    /// Chi-square gate probability; `None` disables gating.
    pub chi2_gate: Option<f64>,
    pub qr_compression: bool,
    /// Compute every update with and without compression and record the
    /// largest difference.
    pub verify_compression: bool,
    pub object_updates: bool,
    /// Fewest in-window observations of a track used in an update.
    pub min_track_length: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Largest accepted inertial sample interval, seconds.
    pub max_imu_dt: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            window: 10,
            noise: ImuNoiseParams::default(),
            residuals: ResidualModel::default(),
            lm: LmConfig::default(),
            zupt: ZuptConfig::default(),
            chi2_gate: None,
            qr_compression: true,
            verify_compression: false,
            object_updates: true,
            min_track_length: 3,
            min_depth: 0.1,
            max_depth: 100.0,
            max_imu_dt: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    Geometric,
    Object,
}

/// Why a track was used or dropped when it closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackOutcome {
    Used { rows: usize },
    Rejected { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    TrackClosed { time: f64, track: u64, kind: TrackKind, outcome: TrackOutcome },
    ObjectMapped { time: f64, track: u64, class: u32, position: Vector3<f64> },
    Zupt { time: f64 },
    UpdateFailed { time: f64, reason: String },
}

/// Running diagnostics of an estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub updates: usize,
    pub zupts: usize,
    pub tracks_used: usize,
    pub tracks_rejected: usize,
    pub max_nullspace_residual: f64,
    pub max_compression_difference: f64,
}

/// A mapped object with every observation consumed so far.
#[derive(Clone, Debug, PartialEq)]
pub struct MappedObject {
    pub track: u64,
    pub class: u32,
    pub instance: ObjectInstance,
    pub updates: usize,
    history: Vec<(Pose, ObjectObservation)>,
}

impl MappedObject {
    /// Gauss-Newton covariance of the object parameters given the stored
    /// observations, treating the camera poses as exact.
    pub fn covariance(&self, cls: &ObjectClass, model: &ResidualModel) -> Result<DMatrix<f64>> {
        let cams: Vec<Pose> = self.history.iter().map(|h| h.0).collect();
        let obs: Vec<ObjectObservation> = self.history.iter().map(|h| h.1.clone()).collect();
        crate::object::object_covariance(&cams, &obs, cls, &self.instance, model)
    }

    pub fn observation_count(&self) -> usize {
        self.history.len()
    }
}

/// Cap on stored observations per mapped object.
const MAX_OBJECT_HISTORY: usize = 100;

/// Iteration cap of the whole-history object refinement.
const REFINE_ITERS: usize = 5;

// (noise variance, window slot, error, IMU Jacobian, object Jacobian)
type ViewBlock = (f64, usize, DVector<f64>, DMatrix<f64>, DMatrix<f64>);
type GeoObservations = Vec<(u64, Vector2<f64>)>;
type ObjObservations = Vec<(u64, ObjectObservation)>;

struct ObjectTrack {
    class: u32,
    obs: Vec<(u64, ObjectObservation)>,
}

/// Filter driver: predicts on inertial samples and updates on closed
/// tracks.
pub struct Estimator {
    pub cfg: EstimatorConfig,
    pub fs: FilterState,
    classes: Vec<ObjectClass>,
    geo_tracks: BTreeMap<u64, Vec<(u64, Vector2<f64>)>>,
    obj_tracks: BTreeMap<u64, ObjectTrack>,
    objects: BTreeMap<u64, MappedObject>,
    zupt: ZuptDetector,
    last_frame: Option<f64>,
    pub stats: EstimatorStats,
}

impl Estimator {
    pub fn new(
        cfg: EstimatorConfig,
        classes: Vec<ObjectClass>,
        time: f64,
        imu: ImuState,
        imu_cov: &Matrix15,
        extrinsics: Pose,
    ) -> Result<Self> {
        cfg.noise.validate()?;
        for c in &classes {
            c.validate()?;
        }
        if cfg.window < 2 {
            return Err(Error::InvalidInput("window needs at least two poses".into()));
        }
        Ok(Estimator {
            fs: FilterState::new(time, imu, imu_cov, cfg.window, extrinsics),
            cfg,
            classes,
            geo_tracks: BTreeMap::new(),
            obj_tracks: BTreeMap::new(),
            objects: BTreeMap::new(),
            zupt: ZuptDetector::default(),
            last_frame: None,
            stats: EstimatorStats::default(),
        })
    }

    pub fn objects(&self) -> impl Iterator<Item = &MappedObject> {
        self.objects.values()
    }

    pub fn classes(&self) -> &[ObjectClass] {
        &self.classes
    }

    /// Propagates over one inertial sample starting at time `t`.
    pub fn process_imu(&mut self, t: f64, z: &InertialSample) -> Result<()> {
        if t < self.fs.time - 1e-9 {
            return Err(Error::NonMonotonicTimestamp { prev: self.fs.time, t });
        }
        z.validate(self.cfg.max_imu_dt)?;
        self.fs = predict(&self.fs, z, &self.cfg.noise, None)?;
        self.zupt.push(t + z.dt, *z, self.cfg.zupt.window);
        Ok(())
    }

    /// Handles a camera frame at the current filter time.
    pub fn process_frame(&mut self, frame: &MeasurementFrame) -> Result<Vec<Event>> {
        if let Some(prev) = self.last_frame {
            if frame.time <= prev {
                return Err(Error::NonMonotonicTimestamp { prev, t: frame.time });
            }
        }
        self.last_frame = Some(frame.time);
        let mut events = Vec::new();
        let fresh = self.zupt.take_fresh();
        if self.cfg.zupt.enabled && self.zupt.is_static(&self.fs.imu, &self.fs.gravity, &self.cfg.zupt) {
            match zero_velocity_update(&self.fs, &fresh, &self.cfg.noise, &self.cfg.zupt) {
                Ok(fs) => {
                    self.fs = fs;
                    self.stats.zupts += 1;
                    events.push(Event::Zupt { time: self.fs.time });
                }
                Err(e) => events.push(Event::UpdateFailed { time: self.fs.time, reason: e.to_string() }),
            }
        }

        let evicted = self.fs.window.last().and_then(|s| s.frame);
        let seen_geo: std::collections::HashSet<u64> = frame.keypoints.iter().map(|k| k.track).collect();
        let seen_obj: std::collections::HashSet<u64> = frame.objects.iter().map(|o| o.track).collect();
        let touches = |fr: &[u64]| evicted.is_some_and(|ev| fr.contains(&ev));

        let mut geo_close = Vec::new();
        let mut geo_lost = Vec::new();
        for (id, obs) in &self.geo_tracks {
            let frames: Vec<u64> = obs.iter().map(|o| o.0).collect();
            if !seen_geo.contains(id) {
                geo_lost.push(*id);
                geo_close.push((*id, obs.clone()));
            } else if touches(&frames) {
                geo_close.push((*id, obs.clone()));
            }
        }
        let mut obj_close = Vec::new();
        let mut obj_lost = Vec::new();
        for (id, tr) in &self.obj_tracks {
            let frames: Vec<u64> = tr.obs.iter().map(|o| o.0).collect();
            if !seen_obj.contains(id) {
                obj_lost.push(*id);
                obj_close.push((*id, tr.class, tr.obs.clone()));
            } else if touches(&frames) {
                obj_close.push((*id, tr.class, tr.obs.clone()));
            }
        }
        events.extend(self.update_tracks(&geo_close, &obj_close));
        for id in geo_lost {
            self.geo_tracks.remove(&id);
        }
        for id in obj_lost {
            self.obj_tracks.remove(&id);
        }
        // Live tracks that were consumed restart from the current frame.
        for (id, _) in &geo_close {
            if let Some(t) = self.geo_tracks.get_mut(id) {
                t.clear();
            }
        }
        for (id, _, _) in &obj_close {
            if let Some(t) = self.obj_tracks.get_mut(id) {
                t.obs.clear();
            }
        }

        self.fs = augment_window(&self.fs, Some(frame.frame));
        for kp in &frame.keypoints {
            self.geo_tracks.entry(kp.track).or_default().push((frame.frame, kp.z));
        }
        for o in &frame.objects {
            self.obj_tracks
                .entry(o.track)
                .or_insert_with(|| ObjectTrack { class: o.class, obs: Vec::new() })
                .obs
                .push((frame.frame, o.observation()));
        }
        Ok(events)
    }

    /// Uses every remaining track as if it were lost.
    pub fn finish(&mut self) -> Vec<Event> {
        let geo: Vec<_> = std::mem::take(&mut self.geo_tracks).into_iter().collect();
        let obj: Vec<_> =
            std::mem::take(&mut self.obj_tracks).into_iter().map(|(id, t)| (id, t.class, t.obs)).collect();
        self.update_tracks(&geo, &obj)
    }

    fn window_cams(&self, frames: &[u64]) -> Vec<Pose> {
        frames.iter().filter_map(|f| self.fs.slot_of_frame(*f)).map(|k| self.fs.camera_pose(k)).collect()
    }

    fn geometric_block(&self, obs: &[(u64, Vector2<f64>)]) -> Result<Projection> {
        let inside: Vec<(u64, Vector2<f64>)> =
            obs.iter().filter(|(f, _)| self.fs.slot_of_frame(*f).is_some()).copied().collect();
        if inside.len() < self.cfg.min_track_length {
            return Err(Error::InsufficientObservations(format!("{} in-window views", inside.len())));
        }
        let frames: Vec<u64> = inside.iter().map(|o| o.0).collect();
        let zs: Vec<Vector2<f64>> = inside.iter().map(|o| o.1).collect();
        let cams = self.window_cams(&frames);
        let tri = triangulate_landmark(&cams, &zs)?;
        let depth_ok = |l: &Vector3<f64>| {
            cams.iter().all(|c| {
                let d = c.inverse().transform_point(l).z;
                d >= self.cfg.min_depth && d <= self.cfg.max_depth
            })
        };
        if !depth_ok(&tri.point) {
            return Err(Error::InsufficientParallax);
        }
        let (l, _) = optimize_landmark(&cams, &zs, &tri.point, &self.cfg.residuals, &self.cfg.lm)?;
        if !depth_ok(&l) {
            return Err(Error::InsufficientParallax);
        }
        let tr = stack_geometric_track(
            &self.fs,
            &inside,
            &l,
            self.cfg.residuals.keypoint_sigma,
            self.cfg.residuals.depth_min,
        )?;
        nullspace_project(&tr)
    }

    fn class_of(&self, id: u32) -> Result<&ObjectClass> {
        self.classes
            .iter()
            .find(|c| c.semantic_id == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown object class {id}")))
    }

    /// Initial object estimate: the mapped instance if any, else the
    /// keypoint initializer, else the ellipsoid initializer.
    fn initial_instance(
        &self,
        track: u64,
        cls: &ObjectClass,
        cams: &[Pose],
        obs: &[ObjectObservation],
    ) -> Result<ObjectInstance> {
        if let Some(m) = self.objects.get(&track) {
            return Ok(m.instance.clone());
        }
        match init_object_pose_keypoints(cams, obs, cls) {
            Ok(a) => Ok(ObjectInstance::undeformed(cls, a.pose)),
            Err(_) => {
                let planes: Vec<_> =
                    cams.iter().zip(obs).flat_map(|(c, o)| o.bbox.iter().map(move |l| world_plane(c, l))).collect();
                let pose = init_object_pose_ellipsoid(&planes, &cls.mean_semiaxes, None)?;
                Ok(ObjectInstance::undeformed(cls, pose))
            }
        }
    }

    fn object_block(
        &self,
        track: u64,
        class: u32,
        obs: &[(u64, ObjectObservation)],
    ) -> Result<(Projection, ObjectInstance)> {
        let cls = self.class_of(class)?.clone();
        let inside: Vec<(u64, ObjectObservation)> =
            obs.iter().filter(|(f, _)| self.fs.slot_of_frame(*f).is_some()).cloned().collect();
        if inside.len() < self.cfg.min_track_length {
            return Err(Error::InsufficientObservations(format!("{} in-window views", inside.len())));
        }
        let frames: Vec<u64> = inside.iter().map(|o| o.0).collect();
        let cams = self.window_cams(&frames);
        let o: Vec<ObjectObservation> = inside.iter().map(|x| x.1.clone()).collect();
        let init = self.initial_instance(track, &cls, &cams, &o)?;
        let (inst, _) = optimize_object(&cams, &o, &init, &cls, &self.cfg.residuals, &self.cfg.lm)?;
        // Only rows that can be evaluated at the estimate enter the update.
        let usable = usable_observations(&cams, &o, &cls, &inst, &self.cfg.residuals);
        let tagged: Vec<(u64, ObjectObservation)> = frames.into_iter().zip(usable).collect();
        let tr = stack_object_track(&self.fs, &tagged, &cls, &inst, &self.cfg.residuals)?;
        Ok((nullspace_project(&tr)?, inst))
    }

    fn update_tracks(&mut self, geo: &[(u64, GeoObservations)], obj: &[(u64, u32, ObjObservations)]) -> Vec<Event> {
        let time = self.fs.time;
        let mut events = Vec::new();
        let mut blocks = Vec::new();
        let reject = |events: &mut Vec<Event>, stats: &mut EstimatorStats, track, kind, e: Error| {
            stats.tracks_rejected += 1;
            events.push(Event::TrackClosed {
                time,
                track,
                kind,
                outcome: TrackOutcome::Rejected { reason: e.to_string() },
            });
        };
        for (id, obs) in geo {
            match self.geometric_block(obs) {
                Ok(p) => {
                    self.stats.max_nullspace_residual = self.stats.max_nullspace_residual.max(p.nullspace_residual);
                    self.stats.tracks_used += 1;
                    events.push(Event::TrackClosed {
                        time,
                        track: *id,
                        kind: TrackKind::Geometric,
                        outcome: TrackOutcome::Used { rows: p.update.rows() },
                    });
                    blocks.push(p.update);
                }
                Err(e) => reject(&mut events, &mut self.stats, *id, TrackKind::Geometric, e),
            }
        }
        let mut mapped = Vec::new();
        for (id, class, obs) in obj {
            match self.object_block(*id, *class, obs) {
                Ok((p, inst)) => {
                    self.stats.max_nullspace_residual = self.stats.max_nullspace_residual.max(p.nullspace_residual);
                    self.stats.tracks_used += 1;
                    events.push(Event::TrackClosed {
                        time,
                        track: *id,
                        kind: TrackKind::Object,
                        outcome: TrackOutcome::Used { rows: p.update.rows() },
                    });
                    if self.cfg.object_updates {
                        blocks.push(p.update);
                    }
                    mapped.push((*id, *class, obs.clone(), inst));
                }
                Err(e) => reject(&mut events, &mut self.stats, *id, TrackKind::Object, e),
            }
        }
        // Blocks are independent, so whitening them one by one whitens the
        // joint stack without factoring its full covariance.
        let whitened: Result<Vec<StackedUpdate>> = blocks.iter().map(whiten).collect();
        let joint = match whitened {
            Ok(w) => StackedUpdate::concat(&w),
            Err(e) => {
                events.push(Event::UpdateFailed { time, reason: e.to_string() });
                None
            }
        };
        if let Some(joint) = joint {
            match self.apply_update(&joint, &blocks) {
                Ok(()) => self.stats.updates += 1,
                Err(e) => events.push(Event::UpdateFailed { time, reason: e.to_string() }),
            }
        }
        for (id, class, obs, inst) in mapped {
            if let Some(ev) = self.map_object(id, class, &obs, inst) {
                events.push(ev);
            }
        }
        events
    }

    /// `joint` is the whitened stack of `raw`.
    fn apply_update(&mut self, joint: &StackedUpdate, raw: &[StackedUpdate]) -> Result<()> {
        let compressed = if self.cfg.qr_compression { qr_compress(joint)? } else { joint.clone() };
        let (fs, _) = ekf_update(&self.fs, &compressed, self.cfg.chi2_gate)?;
        if self.cfg.verify_compression {
            // Compare against the plain, unwhitened stack.
            let plain = StackedUpdate::concat(raw).expect("non-empty");
            let other = if self.cfg.qr_compression { plain } else { qr_compress(joint)? };
            let (alt, _) = ekf_update(&self.fs, &other, None)?;
            let dmean = state_difference(&fs, &alt);
            let dcov = (&fs.covariance - &alt.covariance).abs().max();
            self.stats.max_compression_difference = self.stats.max_compression_difference.max(dmean.max(dcov));
        }
        self.fs = fs;
        Ok(())
    }

    /// Appends the consumed observations, with the updated camera poses, to
    /// the object's map entry and refines it over its whole history.
    fn map_object(
        &mut self,
        id: u64,
        class: u32,
        obs: &[(u64, ObjectObservation)],
        inst: ObjectInstance,
    ) -> Option<Event> {
        let cls = self.class_of(class).ok()?.clone();
        let new: Vec<(Pose, ObjectObservation)> = obs
            .iter()
            .filter_map(|(f, o)| self.fs.slot_of_frame(*f).map(|k| (self.fs.camera_pose(k), o.clone())))
            .collect();
        let entry = self.objects.entry(id).or_insert_with(|| MappedObject {
            track: id,
            class,
            instance: inst.clone(),
            updates: 0,
            history: Vec::new(),
        });
        entry.history.extend(new);
        if entry.history.len() > MAX_OBJECT_HISTORY {
            // Thin out evenly, always keeping the newest view.
            let n = entry.history.len();
            let old = std::mem::take(&mut entry.history);
            entry.history =
                old.into_iter().enumerate().filter(|(i, _)| (n - 1 - i).is_multiple_of(2)).map(|(_, h)| h).collect();
        }
        let cams: Vec<Pose> = entry.history.iter().map(|h| h.0).collect();
        let o: Vec<ObjectObservation> = entry.history.iter().map(|h| h.1.clone()).collect();
        let start = if entry.updates == 0 { inst } else { entry.instance.clone() };
        // Warm started, so a few iterations per refinement suffice.
        let lm = LmConfig { max_iters: self.cfg.lm.max_iters.min(REFINE_ITERS), ..self.cfg.lm };
        entry.instance = match optimize_object(&cams, &o, &start, &cls, &self.cfg.residuals, &lm) {
            Ok((refined, _)) => refined,
            Err(_) => start,
        };
        entry.updates += 1;
        Some(Event::ObjectMapped { time: self.fs.time, track: id, class, position: entry.instance.pose.translation })
    }
}

/// Largest difference between two filter means in error-state coordinates.
fn state_difference(a: &FilterState, b: &FilterState) -> f64 {
    let mut d = (a.imu.rotation.inverse() * b.imu.rotation).log().amax();
    d = d.max((a.imu.velocity - b.imu.velocity).amax());
    d = d.max((a.imu.position - b.imu.position).amax());
    d = d.max((a.imu.bias_gyro - b.imu.bias_gyro).amax());
    d = d.max((a.imu.bias_accel - b.imu.bias_accel).amax());
    for (sa, sb) in a.window.iter().zip(&b.window) {
        d = d.max((sa.pose.rotation.inverse() * sb.pose.rotation).log().amax());
        d = d.max((sa.pose.translation - sb.pose.translation).amax());
    }
    d
}
