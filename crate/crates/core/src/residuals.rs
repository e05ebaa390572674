//! Measurement error functions and their analytic Jacobians.
//!
//! Jacobians with respect to the IMU pose use the `(theta, p)` perturbation.
//! Object Jacobians are laid out as `(object twist (6), delta_u (3),
//! delta_s (3 N_s))`, the twist itself being `(rho, theta)`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, RowVector4, SMatrix, Vector2, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{ImuState, InertialSample, BA, BG, THETA};
use crate::lie::{camera_from_imu_jacobian, circledcirc, dual_quadric, homogeneous, odot, project, skew, Pose};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;
pub type Matrix2x3 = SMatrix<f64, 2, 3>;
pub type RowVector6 = SMatrix<f64, 1, 6>;
pub type Matrix4x6 = SMatrix<f64, 4, 6>;
pub type Matrix6x15 = SMatrix<f64, 6, 15>;

/// Norm of the plane normal below which a bbox plane is rejected.
pub const DEGENERATE_NORMAL: f64 = 1e-12;

/// Category-level shape prior: mean semantic landmarks and mean semi-axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub semantic_id: u32,
    pub name: String,
    pub mean_landmarks: Vec<Vector3<f64>>,
    pub mean_semiaxes: Vector3<f64>,
}

impl ObjectClass {
    pub fn num_landmarks(&self) -> usize {
        self.mean_landmarks.len()
    }

    /// Number of object parameters `6 + 3 + 3 N_s`.
    pub fn param_dim(&self) -> usize {
        9 + 3 * self.num_landmarks()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean_landmarks.len() < 3 {
            return Err(Error::InvalidInput(format!("class {} needs at least 3 landmarks", self.name)));
        }
        if self.mean_semiaxes.iter().any(|&u| !(u > 0.0)) {
            return Err(Error::NonPositiveSemiAxis);
        }
        Ok(())
    }
}

/// A concrete object: pose plus deformations of the class prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub pose: Pose,
    pub delta_landmarks: Vec<Vector3<f64>>,
    pub delta_semiaxes: Vector3<f64>,
}

impl ObjectInstance {
    pub fn undeformed(cls: &ObjectClass, pose: Pose) -> Self {
        ObjectInstance {
            pose,
            delta_landmarks: vec![Vector3::zeros(); cls.num_landmarks()],
            delta_semiaxes: Vector3::zeros(),
        }
    }

    pub fn semiaxes(&self, cls: &ObjectClass) -> Vector3<f64> {
        cls.mean_semiaxes + self.delta_semiaxes
    }

    /// Landmark `l` in the object frame.
    pub fn landmark(&self, cls: &ObjectClass, l: usize) -> Vector3<f64> {
        cls.mean_landmarks[l] + self.delta_landmarks[l]
    }

    pub fn landmark_world(&self, cls: &ObjectClass, l: usize) -> Vector3<f64> {
        self.pose.transform_point(&self.landmark(cls, l))
    }

    /// Apply an object-parameter increment `(twist, delta_u, delta_s)`.
    pub fn oplus(&self, d: &DVector<f64>) -> ObjectInstance {
        let xi = crate::lie::Twist::from_vector(&Vector6::from_fn(|i, _| d[i]));
        let du = Vector3::new(d[6], d[7], d[8]);
        let delta_landmarks = self
            .delta_landmarks
            .iter()
            .enumerate()
            .map(|(l, ds)| ds + Vector3::new(d[9 + 3 * l], d[10 + 3 * l], d[11 + 3 * l]))
            .collect();
        ObjectInstance { pose: self.pose.perturb(&xi), delta_landmarks, delta_semiaxes: self.delta_semiaxes + du }
    }
}

/// Bounding-box edge `a x + b y + c = 0` in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBoxLine(pub Vector3<f64>);

impl BBoxLine {
    /// Scales to `|(a, b)| = 1` and orients the line so that `interior`
    /// evaluates negative.
    pub fn normalized(line: Vector3<f64>, interior: &Vector2<f64>) -> Result<Self> {
        let n = line.xy().norm();
        if !(n > DEGENERATE_NORMAL) {
            return Err(Error::DegeneratePlane);
        }
        let mut l = line / n;
        if l.x * interior.x + l.y * interior.y + l.z > 0.0 {
            l = -l;
        }
        Ok(BBoxLine(l))
    }

    /// `P^T z` for the line: the plane through the camera center.
    pub fn camera_plane(&self) -> Vector4<f64> {
        Vector4::new(self.0.x, self.0.y, self.0.z, 0.0)
    }
}

/// Plane `b^T x = b_h` in the object frame, i.e. homogeneous `(b, -b_h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneInObjectFrame {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl PlaneInObjectFrame {
    pub fn from_homogeneous(h: &Vector4<f64>) -> Self {
        PlaneInObjectFrame { normal: h.xyz(), offset: -h.w }
    }

    pub fn homogeneous(&self) -> Vector4<f64> {
        Vector4::new(self.normal.x, self.normal.y, self.normal.z, -self.offset)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometricResidual {
    pub error: Vector2<f64>,
    pub jac_cam: Matrix2x6,
    pub jac_imu: Matrix2x6,
    pub jac_landmark: Matrix2x3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectResidual {
    pub error: DVector<f64>,
    pub jac_cam: DMatrix<f64>,
    pub jac_imu: DMatrix<f64>,
    /// Columns `(twist, delta_u, delta_s)`.
    pub jac_obj: DMatrix<f64>,
}

fn p_dpi_2x4(dpi: &Matrix4<f64>) -> SMatrix<f64, 2, 4> {
    dpi.fixed_view::<2, 4>(0, 0).into_owned()
}

/// Reprojection error of a world landmark: `P pi(C^-1 l) - z`.
pub fn geometric_error(
    imu_pose: &Pose,
    extrinsics: &Pose,
    l: &Vector3<f64>,
    z: &Vector2<f64>,
    depth_min: f64,
) -> Result<GeometricResidual> {
    let cam = *imu_pose * *extrinsics;
    let cam_inv = cam.inverse().to_homogeneous();
    let s = cam_inv * homogeneous(l);
    let (proj, dpi) = project(&s, depth_min)?;
    let pd = p_dpi_2x4(&dpi);
    let jac_cam = -pd * odot(&s);
    let jac_imu = jac_cam * camera_from_imu_jacobian(imu_pose, extrinsics);
    let jac_landmark = pd * cam_inv.fixed_view::<4, 3>(0, 0);
    Ok(GeometricResidual { error: proj - z, jac_cam, jac_imu, jac_landmark })
}

/// Reprojection error of semantic landmark `l` of an object instance.
pub fn semantic_error(
    imu_pose: &Pose,
    extrinsics: &Pose,
    cls: &ObjectClass,
    inst: &ObjectInstance,
    l: usize,
    z: &Vector2<f64>,
    depth_min: f64,
) -> Result<ObjectResidual> {
    if l >= cls.num_landmarks() {
        return Err(Error::InvalidInput(format!("landmark index {l} out of range")));
    }
    let cam = *imu_pose * *extrinsics;
    let rel = cam.inverse().to_homogeneous() * inst.pose.to_homogeneous();
    let sl = homogeneous(&inst.landmark(cls, l));
    let s = rel * sl;
    let (proj, dpi) = project(&s, depth_min)?;
    let pd = p_dpi_2x4(&dpi);
    let jac_cam = -pd * odot(&s);
    let jac_imu = jac_cam * camera_from_imu_jacobian(imu_pose, extrinsics);
    let pd_rel = pd * rel;
    let jac_pose = pd_rel * odot(&sl);
    let jac_ds = pd_rel.fixed_view::<2, 3>(0, 0).into_owned();
    let mut jac_obj = DMatrix::zeros(2, cls.param_dim());
    jac_obj.view_mut((0, 0), (2, 6)).copy_from(&jac_pose);
    jac_obj.view_mut((0, 9 + 3 * l), (2, 3)).copy_from(&jac_ds);
    Ok(ObjectResidual {
        error: DVector::from_column_slice((proj - z).as_slice()),
        jac_cam: DMatrix::from_column_slice(2, 6, jac_cam.as_slice()),
        jac_imu: DMatrix::from_column_slice(2, 6, jac_imu.as_slice()),
        jac_obj,
    })
}

/// `b = O^T C^-T P^T z`, the bbox plane expressed in the object frame.
pub fn plane_from_bbox_line(cam: &Pose, obj_pose: &Pose, line: &BBoxLine) -> Result<PlaneInObjectFrame> {
    let h = bbox_plane_homogeneous(cam, obj_pose, line);
    let plane = PlaneInObjectFrame::from_homogeneous(&h);
    if plane.normal.norm() < DEGENERATE_NORMAL {
        return Err(Error::DegeneratePlane);
    }
    Ok(plane)
}

fn bbox_plane_homogeneous(cam: &Pose, obj_pose: &Pose, line: &BBoxLine) -> Vector4<f64> {
    obj_pose.to_homogeneous().transpose() * cam.inverse().to_homogeneous().transpose() * line.camera_plane()
}

fn sgn(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Signed distance from the plane to the nearest parallel tangent plane of
/// the origin-centered ellipsoid with semi-axes `u`.
pub fn tangent_distance(plane: &PlaneInObjectFrame, u: &Vector3<f64>) -> Result<f64> {
    Ok(tangent_distance_with_jacobians(plane, u)?.0)
}

/// Distance plus its gradients with respect to the homogeneous plane
/// `(b, -b_h)` and to the semi-axes.
pub fn tangent_distance_with_jacobians(
    plane: &PlaneInObjectFrame,
    u: &Vector3<f64>,
) -> Result<(f64, RowVector4<f64>, nalgebra::RowVector3<f64>)> {
    let b = plane.normal;
    let bh = plane.offset;
    let nb = b.norm();
    if nb < DEGENERATE_NORMAL {
        return Err(Error::DegeneratePlane);
    }
    if u.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::NonPositiveSemiAxis);
    }
    let u2b = b.component_mul(u).component_mul(u);
    let root = b.dot(&u2b).sqrt();
    let sg = sgn(bh);
    let d = (sg * root - bh) / nb;
    let nb3 = nb * nb * nb;
    let db = (u2b / (nb * root) - b * (root / nb3)) * sg + b * (bh / nb3);
    let dlast = 1.0 / nb;
    let de_db = RowVector4::new(db.x, db.y, db.z, dlast);
    let de_du = (u.component_mul(&b).component_mul(&b) * (sg / (nb * root))).transpose();
    Ok((d, de_db, de_du))
}

fn object_frame_geometry(cam: &Pose, inst_pose: &Pose) -> Matrix4<f64> {
    inst_pose.to_homogeneous().transpose() * cam.inverse().to_homogeneous().transpose()
}

/// Bbox-to-ellipsoid tangent distance and its Jacobians.
pub fn bbox_error(
    imu_pose: &Pose,
    extrinsics: &Pose,
    cls: &ObjectClass,
    inst: &ObjectInstance,
    line: &BBoxLine,
) -> Result<ObjectResidual> {
    let cam = *imu_pose * *extrinsics;
    let m = object_frame_geometry(&cam, &inst.pose);
    let zp = line.camera_plane();
    let bh = m * zp;
    let plane = PlaneInObjectFrame::from_homogeneous(&bh);
    let u = inst.semiaxes(cls);
    let (d, de_db, de_du) = tangent_distance_with_jacobians(&plane, &u)?;
    let db_dcam: Matrix4x6 = -m * circledcirc(&zp).transpose();
    let db_dobj: Matrix4x6 = circledcirc(&bh).transpose();
    let jac_cam = de_db * db_dcam;
    let jac_imu = jac_cam * camera_from_imu_jacobian(imu_pose, extrinsics);
    let mut jac_obj = DMatrix::zeros(1, cls.param_dim());
    jac_obj.view_mut((0, 0), (1, 6)).copy_from(&(de_db * db_dobj));
    jac_obj.view_mut((0, 6), (1, 3)).copy_from(&de_du);
    Ok(ObjectResidual {
        error: DVector::from_element(1, d),
        jac_cam: DMatrix::from_row_slice(1, 6, jac_cam.as_slice()),
        jac_imu: DMatrix::from_row_slice(1, 6, jac_imu.as_slice()),
        jac_obj,
    })
}

/// Quadratic bbox residual `b^T Q*_u b`; zero when the line is tangent to
/// the projected conic.
pub fn bbox_error_quadratic(
    imu_pose: &Pose,
    extrinsics: &Pose,
    cls: &ObjectClass,
    inst: &ObjectInstance,
    line: &BBoxLine,
) -> Result<ObjectResidual> {
    let cam = *imu_pose * *extrinsics;
    let m = object_frame_geometry(&cam, &inst.pose);
    let zp = line.camera_plane();
    let y = m * zp;
    let u = inst.semiaxes(cls);
    let q = dual_quadric(&u)?;
    let qy = q.matrix() * y;
    let e = y.dot(&qy);
    let grad = (qy * 2.0).transpose();
    let jac_cam = -grad * m * circledcirc(&zp).transpose();
    let jac_imu = jac_cam * camera_from_imu_jacobian(imu_pose, extrinsics);
    let jac_pose = grad * circledcirc(&y).transpose();
    let yv = y.xyz();
    let de_du = (u.component_mul(&yv).component_mul(&yv) * 2.0).transpose();
    let mut jac_obj = DMatrix::zeros(1, cls.param_dim());
    jac_obj.view_mut((0, 0), (1, 6)).copy_from(&jac_pose);
    jac_obj.view_mut((0, 6), (1, 3)).copy_from(&de_du);
    Ok(ObjectResidual {
        error: DVector::from_element(1, e),
        jac_cam: DMatrix::from_row_slice(1, 6, jac_cam.as_slice()),
        jac_imu: DMatrix::from_row_slice(1, 6, jac_imu.as_slice()),
        jac_obj,
    })
}

/// Shape regularizer `(delta_u, delta_s_1 / sqrt(N_s), ...)` and its
/// constant Jacobian over the full object parameter vector.
pub fn regularization_error(cls: &ObjectClass, inst: &ObjectInstance) -> (DVector<f64>, DMatrix<f64>) {
    let ns = cls.num_landmarks();
    let scale = 1.0 / (ns as f64).sqrt();
    let mut e = DVector::zeros(3 + 3 * ns);
    e.fixed_rows_mut::<3>(0).copy_from(&inst.delta_semiaxes);
    for (l, ds) in inst.delta_landmarks.iter().enumerate() {
        e.fixed_rows_mut::<3>(3 + 3 * l).copy_from(&(ds * scale));
    }
    let mut j = DMatrix::zeros(3 + 3 * ns, cls.param_dim());
    for i in 0..3 {
        j[(i, 6 + i)] = 1.0;
    }
    for k in 0..3 * ns {
        j[(3 + k, 9 + k)] = scale;
    }
    (e, j)
}

/// Pseudo-measurement residual asserting the platform is static:
/// `(omega - b_g, R (a - b_a) + g)`, with its 6x15 IMU-state Jacobian.
pub fn zero_velocity_error(state: &ImuState, z: &InertialSample, g: &Vector3<f64>) -> (Vector6<f64>, Matrix6x15) {
    let r = state.rotation.matrix();
    let a = z.accel - state.bias_accel;
    let mut e = Vector6::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&(z.omega - state.bias_gyro));
    e.fixed_rows_mut::<3>(3).copy_from(&(r * a + g));
    let mut j = Matrix6x15::zeros();
    j.fixed_view_mut::<3, 3>(3, THETA).copy_from(&(-r * skew(&a)));
    j.fixed_view_mut::<3, 3>(0, BG).copy_from(&(-Matrix3::identity()));
    j.fixed_view_mut::<3, 3>(3, BA).copy_from(&(-r));
    (e, j)
}
