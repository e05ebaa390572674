//! Landmark triangulation, object-pose initialization and the
//! Levenberg-Marquardt refinement of landmarks and objects for a fixed set of
//! camera poses.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{Pose, Rotation};
use crate::residuals::{
    bbox_error, bbox_error_quadratic, geometric_error, regularization_error, semantic_error, BBoxLine, ObjectClass,
    ObjectInstance,
};

/// Smallest allowed total semi-axis, in meters.
pub const MIN_SEMIAXIS: f64 = 0.01;
const MAX_CONDITION: f64 = 1e8;
const MIN_BASELINE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub max_iters: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub step_tol: f64,
    pub cost_rel_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iters: 20,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            step_tol: 1e-8,
            cost_rel_tol: 1e-9,
        }
    }
}

/// Relative weights and noise levels of the reconstruction cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualModel {
    pub weight_geometric: f64,
    pub weight_semantic: f64,
    pub weight_bbox: f64,
    pub weight_regularization: f64,
    /// Keypoint standard deviation in normalized image units.
    pub keypoint_sigma: f64,
    /// Bounding-box residual standard deviation.
    pub bbox_sigma: f64,
    /// Use the quadratic bbox residual instead of the tangent distance.
    pub quadratic_bbox: bool,
    pub depth_min: f64,
}

impl Default for ResidualModel {
    fn default() -> Self {
        ResidualModel {
            weight_geometric: 1.0,
            weight_semantic: 1.0,
            weight_bbox: 1.0,
            weight_regularization: 1.0,
            keypoint_sigma: 1.0 / 500.0,
            bbox_sigma: 0.1,
            quadratic_bbox: false,
            depth_min: crate::lie::DEFAULT_DEPTH_MIN,
        }
    }
}

/// Outcome summary of one Levenberg-Marquardt solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// The iteration cap was reached; the best iterate is still returned.
    pub max_iters_exceeded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// RMS reprojection error in normalized image units.
    pub reprojection_rms: f64,
}

/// Linear triangulation from camera poses and normalized observations.
pub fn triangulate_landmark(cams: &[Pose], zs: &[Vector2<f64>]) -> Result<Triangulation> {
    if cams.len() != zs.len() || cams.len() < 2 {
        return Err(Error::InsufficientObservations("triangulation needs two views".into()));
    }
    let mut baseline: f64 = 0.0;
    for c in cams {
        baseline = baseline.max((c.translation - cams[0].translation).norm());
    }
    if baseline < MIN_BASELINE {
        return Err(Error::InsufficientParallax);
    }
    let n = cams.len();
    let mut a = DMatrix::zeros(2 * n, 3);
    let mut b = DVector::zeros(2 * n);
    for (k, (c, z)) in cams.iter().zip(zs).enumerate() {
        let rt = c.r().transpose();
        let r3 = rt.row(2);
        for (i, zi) in [z.x, z.y].into_iter().enumerate() {
            let row = rt.row(i) - r3 * zi;
            a.row_mut(2 * k + i).copy_from(&row);
            b[2 * k + i] = row.dot(&c.translation.transpose());
        }
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(Error::InsufficientParallax);
    }
    let x = svd.solve(&b, 0.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let point = Vector3::new(x[0], x[1], x[2]);
    let mut sq = 0.0;
    for (c, z) in cams.iter().zip(zs) {
        let s = c.inverse().transform_point(&point);
        if s.z <= 0.0 {
            return Err(Error::InsufficientParallax);
        }
        sq += (Vector2::new(s.x / s.z, s.y / s.z) - z).norm_squared();
    }
    Ok(Triangulation { point, reprojection_rms: (sq / n as f64).sqrt() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub pose: Pose,
    /// RMS distance between `dst` and the aligned `src`.
    pub residual_rms: f64,
}

/// Least-squares rigid transform with `dst ~ R src + p` and `det R = +1`.
pub fn kabsch_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Alignment> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::DegenerateConfiguration("alignment needs three correspondences".into()));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let xs = Matrix3xX::from_columns(&src.iter().map(|s| s - cs).collect::<Vec<_>>());
    let sv = xs.clone().svd(false, false).singular_values;
    if sv[1] <= 1e-9 * sv[0].max(1e-300) {
        return Err(Error::DegenerateConfiguration("points are collinear".into()));
    }
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let p = cd - r * cs;
    let pose = Pose::new(Rotation::from_matrix(r), p);
    let sq: f64 = src.iter().zip(dst).map(|(s, d)| (d - pose.transform_point(s)).norm_squared()).sum();
    Ok(Alignment { pose, residual_rms: (sq / n).sqrt() })
}

/// A semantic keypoint observation of landmark `landmark` of an object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticKeypoint {
    pub landmark: usize,
    pub z: Vector2<f64>,
}

/// Everything observed about one object in one camera frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectObservation {
    pub keypoints: Vec<SemanticKeypoint>,
    pub bbox: Vec<BBoxLine>,
}

/// Triangulates semantic landmarks seen twice or more and aligns the class
/// mean shape to them.
pub fn init_object_pose_keypoints(cams: &[Pose], obs: &[ObjectObservation], cls: &ObjectClass) -> Result<Alignment> {
    let mut per_landmark: Vec<(Vec<Pose>, Vec<Vector2<f64>>)> = vec![(Vec::new(), Vec::new()); cls.num_landmarks()];
    for (cam, o) in cams.iter().zip(obs) {
        for kp in &o.keypoints {
            if kp.landmark < per_landmark.len() {
                per_landmark[kp.landmark].0.push(*cam);
                per_landmark[kp.landmark].1.push(kp.z);
            }
        }
    }
    let eligible = per_landmark.iter().filter(|(c, _)| c.len() >= 2).count();
    if eligible < 3 {
        return Err(Error::InsufficientObservations(format!("{eligible} semantic landmarks seen twice")));
    }
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (l, (c, z)) in per_landmark.iter().enumerate() {
        if c.len() < 2 {
            continue;
        }
        if let Ok(t) = triangulate_landmark(c, z) {
            src.push(cls.mean_landmarks[l]);
            dst.push(t.point);
        }
    }
    if src.len() < 3 {
        return Err(Error::InsufficientObservations("fewer than three triangulable landmarks".into()));
    }
    kabsch_align(&src, &dst)
}

/// World-frame plane induced by a bbox line seen from `cam`.
pub fn world_plane(cam: &Pose, line: &BBoxLine) -> Vector4<f64> {
    cam.inverse().to_homogeneous().transpose() * line.camera_plane()
}

/// Fits a dual quadric to tangent planes. Returns it scaled so `Q[3,3] = -1`.
pub fn fit_dual_quadric(planes: &[Vector4<f64>]) -> Result<nalgebra::Matrix4<f64>> {
    if planes.len() < 9 {
        return Err(Error::RankDeficient);
    }
    let rows = planes.len().max(10);
    let mut m = DMatrix::zeros(rows, 10);
    for (k, pl) in planes.iter().enumerate() {
        let p = pl / pl.norm();
        let mut c = 0;
        for i in 0..4 {
            for j in i..4 {
                m[(k, c)] = if i == j { p[i] * p[i] } else { 2.0 * p[i] * p[j] };
                c += 1;
            }
        }
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let mut order: Vec<usize> = (0..10).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s1 = svd.singular_values[order[0]];
    let s9 = svd.singular_values[order[8]];
    if s9 <= 1e-9 * s1 {
        return Err(Error::RankDeficient);
    }
    let w = v_t.row(order[9]);
    let mut q = nalgebra::Matrix4::zeros();
    let mut c = 0;
    for i in 0..4 {
        for j in i..4 {
            q[(i, j)] = w[c];
            q[(j, i)] = w[c];
            c += 1;
        }
    }
    if q[(3, 3)].abs() < 1e-12 * q.norm() {
        return Err(Error::DegenerateConfiguration("fitted quadric has no finite center".into()));
    }
    Ok(q / -q[(3, 3)])
}

/// Recovers the object pose from tangent world planes and class semi-axes.
/// Axis assignment follows the ordering of `u`; signs are resolved towards
/// `reference` (identity if absent) with `det R = +1`.
pub fn init_object_pose_ellipsoid(
    planes: &[Vector4<f64>],
    u: &Vector3<f64>,
    reference: Option<&Rotation>,
) -> Result<Pose> {
    let q = fit_dual_quadric(planes)?;
    pose_from_dual_quadric(&q, u, reference)
}

pub fn pose_from_dual_quadric(
    q: &nalgebra::Matrix4<f64>,
    u: &Vector3<f64>,
    reference: Option<&Rotation>,
) -> Result<Pose> {
    let p = -q.fixed_view::<3, 1>(0, 3).into_owned();
    let a: Matrix3<f64> = q.fixed_view::<3, 3>(0, 0).into_owned() + p * p.transpose();
    let eig = a.symmetric_eigen();
    let mut by_value: Vec<usize> = (0..3).collect();
    by_value.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mut by_axis: Vec<usize> = (0..3).collect();
    by_axis.sort_by(|&i, &j| u[i].total_cmp(&u[j]));
    let mut v = Matrix3::zeros();
    for rank in 0..3 {
        v.set_column(by_axis[rank], &eig.eigenvectors.column(by_value[rank]));
    }
    let target = reference.map(|r| *r.matrix()).unwrap_or_else(Matrix3::identity);
    let mut best: Option<(f64, Matrix3<f64>)> = None;
    for signs in 0..8u32 {
        let mut cand = v;
        for c in 0..3 {
            if signs & (1 << c) != 0 {
                cand.set_column(c, &(-cand.column(c)));
            }
        }
        if cand.determinant() < 0.0 {
            continue;
        }
        let dist = (cand - target).norm();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, cand));
        }
    }
    let r = best.expect("a proper rotation among sign flips").1;
    Ok(Pose::new(Rotation::from_matrix(r), p))
}

/// Whitened stacked residual `r` and Jacobian `J` so that the cost is `|r|^2`.
struct Linearization {
    r: DVector<f64>,
    j: DMatrix<f64>,
}

fn lm_solve<X: Clone>(
    x0: X,
    dim: usize,
    cfg: &LmConfig,
    linearize: impl Fn(&X) -> Result<Linearization>,
    retract: impl Fn(&X, &DVector<f64>) -> Result<X>,
) -> Result<(X, LmReport)> {
    let mut x = x0;
    let mut lin = linearize(&x)?;
    let mut cost = lin.r.norm_squared();
    let mut report = LmReport { initial_cost: cost, final_cost: cost, ..Default::default() };
    let mut lambda = cfg.initial_damping;
    for it in 0..cfg.max_iters {
        report.iterations = it + 1;
        let h = lin.j.transpose() * &lin.j;
        let g = lin.j.transpose() * &lin.r;
        if g.norm() < 1e-14 * (1.0 + cost) {
            report.converged = true;
            break;
        }
        let mut accepted = false;
        let mut small_step = false;
        while lambda < 1e16 {
            let mut damped = h.clone();
            for i in 0..dim {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let step = match damped.cholesky() {
                Some(ch) => -ch.solve(&g),
                None => {
                    lambda *= cfg.damping_up;
                    continue;
                }
            };
            let cand = retract(&x, &step).and_then(|c| linearize(&c).map(|l| (c, l)));
            match cand {
                Ok((c, l)) if l.r.norm_squared() < cost => {
                    let new_cost = l.r.norm_squared();
                    let rel = (cost - new_cost) / cost.max(1e-300);
                    small_step = step.norm() < cfg.step_tol || rel < cfg.cost_rel_tol;
                    x = c;
                    lin = l;
                    cost = new_cost;
                    lambda = (lambda / cfg.damping_down).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => {
                    if step.norm() < cfg.step_tol {
                        small_step = true;
                        break;
                    }
                    lambda *= cfg.damping_up;
                }
            }
        }
        if small_step || !accepted {
            report.converged = true;
            break;
        }
    }
    if !report.converged {
        report.max_iters_exceeded = true;
    }
    report.final_cost = cost;
    Ok((x, report))
}

/// Refines a landmark position for fixed camera poses.
pub fn optimize_landmark(
    cams: &[Pose],
    zs: &[Vector2<f64>],
    l0: &Vector3<f64>,
    model: &ResidualModel,
    cfg: &LmConfig,
) -> Result<(Vector3<f64>, LmReport)> {
    let w = model.weight_geometric.sqrt() / model.keypoint_sigma;
    let id = Pose::identity();
    let linearize = |l: &Vector3<f64>| -> Result<Linearization> {
        let mut r = DVector::zeros(2 * cams.len());
        let mut j = DMatrix::zeros(2 * cams.len(), 3);
        for (k, (c, z)) in cams.iter().zip(zs).enumerate() {
            let g = geometric_error(c, &id, l, z, model.depth_min)?;
            r.rows_mut(2 * k, 2).copy_from(&(g.error * w));
            j.view_mut((2 * k, 0), (2, 3)).copy_from(&(g.jac_landmark * w));
        }
        Ok(Linearization { r, j })
    };
    let retract = |l: &Vector3<f64>, d: &DVector<f64>| Ok(l + Vector3::new(d[0], d[1], d[2]));
    lm_solve(*l0, 3, cfg, linearize, retract)
}

/// Weighted residual stack of one object for fixed camera poses.
fn object_linearization(
    cams: &[Pose],
    obs: &[ObjectObservation],
    cls: &ObjectClass,
    inst: &ObjectInstance,
    model: &ResidualModel,
) -> Result<Linearization> {
    let id = Pose::identity();
    let ws = model.weight_semantic.sqrt() / model.keypoint_sigma;
    let wb = model.weight_bbox.sqrt() / model.bbox_sigma;
    let wr = model.weight_regularization.sqrt();
    let dim = cls.param_dim();
    let mut rows: Vec<(f64, DVector<f64>, DMatrix<f64>)> = Vec::new();
    for (cam, o) in cams.iter().zip(obs) {
        for kp in &o.keypoints {
            let s = semantic_error(cam, &id, cls, inst, kp.landmark, &kp.z, model.depth_min)?;
            rows.push((ws, s.error, s.jac_obj));
        }
        for line in &o.bbox {
            let b = if model.quadratic_bbox {
                bbox_error_quadratic(cam, &id, cls, inst, line)?
            } else {
                bbox_error(cam, &id, cls, inst, line)?
            };
            rows.push((wb, b.error, b.jac_obj));
        }
    }
    let (re, rj) = regularization_error(cls, inst);
    rows.push((wr, re, rj));
    let total: usize = rows.iter().map(|(_, e, _)| e.len()).sum();
    let mut r = DVector::zeros(total);
    let mut j = DMatrix::zeros(total, dim);
    let mut at = 0;
    for (w, e, jac) in rows {
        let n = e.len();
        r.rows_mut(at, n).copy_from(&(e * w));
        j.view_mut((at, 0), (n, dim)).copy_from(&(jac * w));
        at += n;
    }
    Ok(Linearization { r, j })
}

/// Weighted reconstruction cost of an object for fixed camera poses.
pub fn object_cost(
    cams: &[Pose],
    obs: &[ObjectObservation],
    cls: &ObjectClass,
    inst: &ObjectInstance,
    model: &ResidualModel,
) -> Result<f64> {
    Ok(object_linearization(cams, obs, cls, inst, model)?.r.norm_squared())
}

/// Gradient of [`object_cost`] with respect to the object perturbation.
pub fn object_gradient(
    cams: &[Pose],
    obs: &[ObjectObservation],
    cls: &ObjectClass,
    inst: &ObjectInstance,
    model: &ResidualModel,
) -> Result<DVector<f64>> {
    let lin = object_linearization(cams, obs, cls, inst, model)?;
    Ok(lin.j.transpose() * lin.r * 2.0)
}

/// Gauss-Newton covariance `(J^T J)^+` of the object parameters at `inst`,
/// in the perturbation order of [`ObjectInstance::oplus`].
pub fn object_covariance(
    cams: &[Pose],
    obs: &[ObjectObservation],
    cls: &ObjectClass,
    inst: &ObjectInstance,
    model: &ResidualModel,
) -> Result<DMatrix<f64>> {
    let obs = usable_observations(cams, obs, cls, inst, model);
    let lin = object_linearization(cams, &obs, cls, inst, model)?;
    let info = lin.j.transpose() * &lin.j;
    info.pseudo_inverse(1e-12).map_err(|e| Error::DegenerateConfiguration(e.to_string()))
}

/// Drops observations that cannot be evaluated at `inst` (behind camera,
/// degenerate planes) so the cost is well defined along the solve.
pub fn usable_observations(
    cams: &[Pose],
    obs: &[ObjectObservation],
    cls: &ObjectClass,
    inst: &ObjectInstance,
    model: &ResidualModel,
) -> Vec<ObjectObservation> {
    let id = Pose::identity();
    cams.iter()
        .zip(obs)
        .map(|(cam, o)| ObjectObservation {
            keypoints: o
                .keypoints
                .iter()
                .filter(|kp| {
                    kp.landmark < cls.num_landmarks()
                        && semantic_error(cam, &id, cls, inst, kp.landmark, &kp.z, model.depth_min).is_ok()
                })
                .copied()
                .collect(),
            bbox: o.bbox.iter().filter(|l| bbox_error(cam, &id, cls, inst, l).is_ok()).copied().collect(),
        })
        .collect()
}

/// Refines pose and shape deformations of one object for fixed cameras.
pub fn optimize_object(
    cams: &[Pose],
    obs: &[ObjectObservation],
    inst0: &ObjectInstance,
    cls: &ObjectClass,
    model: &ResidualModel,
    cfg: &LmConfig,
) -> Result<(ObjectInstance, LmReport)> {
    let obs = usable_observations(cams, obs, cls, inst0, model);
    let linearize = |inst: &ObjectInstance| object_linearization(cams, &obs, cls, inst, model);
    let retract = |inst: &ObjectInstance, d: &DVector<f64>| -> Result<ObjectInstance> {
        let mut next = inst.oplus(d);
        for i in 0..3 {
            let floor = MIN_SEMIAXIS - cls.mean_semiaxes[i];
            if next.delta_semiaxes[i] < floor {
                next.delta_semiaxes[i] = floor;
            }
        }
        Ok(next)
    };
    let (inst, report) = lm_solve(inst0.clone(), cls.param_dim(), cfg, linearize, retract)?;
    if inst.semiaxes(cls).iter().any(|&u| u <= MIN_SEMIAXIS) {
        return Err(Error::ShapeCollapsed);
    }
    Ok((inst, report))
}

/// Forward model for the ellipsoid initializer tests and the simulator:
/// world planes tangent to a posed ellipsoid with the given normals.
pub fn tangent_planes(pose: &Pose, u: &Vector3<f64>, normals: &[Vector3<f64>]) -> Vec<Vector4<f64>> {
    let q = crate::lie::transform_dual_quadric(pose, &crate::lie::dual_quadric(u).expect("positive axes"));
    normals
        .iter()
        .map(|n| {
            // pi = (n, d): pi^T Q pi = 0 is quadratic in d.
            let m = q.matrix();
            let nn = Vector4::new(n.x, n.y, n.z, 0.0);
            let a = m[(3, 3)];
            let b = 2.0 * (m.row(3) * nn)[0];
            let c = (nn.transpose() * m * nn)[0];
            let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
            let d = (-b + disc) / (2.0 * a);
            Vector4::new(n.x, n.y, n.z, d)
        })
        .collect()
}
