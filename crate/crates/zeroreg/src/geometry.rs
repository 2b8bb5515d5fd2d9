//! Rigid 6-DoF transforms, analytic Jacobians, and pose-error metrics.
//!
//! Rotations use the extrinsic X-Y-Z Euler convention: the matrix form is
//! `R = Rz(rz) * Ry(ry) * Rx(rx)`. Angles are radians, translations meters.
//! No angle normalization is performed; optimization steps stay far from the
//! wrap-around regime.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// 3x6 Jacobian of a transformed point with respect to the six pose
/// parameters, ordered `(rx, ry, rz, tx, ty, tz)`.
pub type PoseJacobian = SMatrix<f64, 3, 6>;

/// The 6-DoF transform estimate: Euler rotation vector plus translation.
///
/// This is the optimization variable of the registration loop. By convention
/// throughout the crate a pose maps source-frame points into the target
/// frame (the same convention as a scene's ground-truth transform).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerPose {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl EulerPose {
    pub const ZERO: EulerPose = EulerPose {
        rx: 0.0,
        ry: 0.0,
        rz: 0.0,
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
    };

    pub fn new(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        EulerPose {
            rx,
            ry,
            rz,
            tx,
            ty,
            tz,
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        EulerPose::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.rx, self.ry, self.rz, self.tx, self.ty, self.tz]
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Concrete matrix form of a rigid transform: `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RigidTransformRepr", into = "RigidTransformRepr")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Row-major JSON representation of [`RigidTransform`].
#[derive(Serialize, Deserialize)]
struct RigidTransformRepr {
    r: [[f64; 3]; 3],
    t: [f64; 3],
}

impl From<RigidTransformRepr> for RigidTransform {
    fn from(v: RigidTransformRepr) -> Self {
        let r = Matrix3::from_fn(|i, j| v.r[i][j]);
        RigidTransform {
            rotation: r,
            translation: Vector3::new(v.t[0], v.t[1], v.t[2]),
        }
    }
}

impl From<RigidTransform> for RigidTransformRepr {
    fn from(v: RigidTransform) -> Self {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = v.rotation[(i, j)];
            }
        }
        RigidTransformRepr {
            r,
            t: [v.translation.x, v.translation.y, v.translation.z],
        }
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    /// Applies the transform to a point: `R x + t`.
    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// The inverse transform `x ↦ Rᵀ(x − t)`.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Composition: `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Checks orthonormality (`RᵀR = I`) and `det R = 1` within `tol` per entry.
    pub fn rotation_is_valid(&self, tol: f64) -> bool {
        let gram = self.rotation.transpose() * self.rotation;
        let id = Matrix3::identity();
        let ortho = (gram - id).iter().all(|e| e.abs() <= tol);
        ortho && (self.rotation.determinant() - 1.0).abs() <= tol
    }
}

/// A ray `r(t) = o + t d` with unit-norm direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Builds a ray, normalizing the direction.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Ray> {
        if !origin.iter().all(|v| v.is_finite()) || !direction.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("ray components must be finite"));
        }
        let norm = direction.norm();
        if norm < 1e-12 {
            return Err(Error::invalid("ray direction must be nonzero"));
        }
        Ok(Ray {
            origin,
            direction: direction / norm,
        })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

fn rx_matrix(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn ry_matrix(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rz_matrix(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rx_matrix_deriv(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn ry_matrix_deriv(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn rz_matrix_deriv(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Converts a pose to its matrix form `R = Rz(rz)·Ry(ry)·Rx(rx)`, `t = (tx,ty,tz)`.
pub fn pose_to_matrix(p: &EulerPose) -> Result<RigidTransform> {
    if !p.is_finite() {
        return Err(Error::invalid("pose components must be finite"));
    }
    Ok(RigidTransform {
        rotation: rz_matrix(p.rz) * ry_matrix(p.ry) * rx_matrix(p.rx),
        translation: p.translation(),
    })
}

/// Derivatives of the rotation matrix w.r.t. each Euler angle:
/// `[∂R/∂rx, ∂R/∂ry, ∂R/∂rz]`.
pub fn rotation_derivatives(p: &EulerPose) -> [Matrix3<f64>; 3] {
    let rx = rx_matrix(p.rx);
    let ry = ry_matrix(p.ry);
    let rz = rz_matrix(p.rz);
    [
        rz * ry * rx_matrix_deriv(p.rx),
        rz * ry_matrix_deriv(p.ry) * rx,
        rz_matrix_deriv(p.rz) * ry * rx,
    ]
}

/// Applies the transform to a point.
#[inline]
pub fn transform_point(t: &RigidTransform, x: &Vector3<f64>) -> Vector3<f64> {
    t.apply(x)
}

/// Jacobian of `x ↦ R(p) x + t(p)` with respect to the six pose parameters.
///
/// Column k is the partial derivative along parameter k; the translation
/// block is the 3x3 identity.
pub fn transform_jacobian(p: &EulerPose, x: &Vector3<f64>) -> PoseJacobian {
    let dr = rotation_derivatives(p);
    let mut j = PoseJacobian::zeros();
    for (k, d) in dr.iter().enumerate() {
        j.set_column(k, &(d * x));
    }
    j[(0, 3)] = 1.0;
    j[(1, 4)] = 1.0;
    j[(2, 5)] = 1.0;
    j
}

/// Jacobian of the inverse map `x ↦ R(p)ᵀ (x − t(p))` with respect to the six
/// pose parameters.
///
/// This is the chain-rule counterpart of [`transform_jacobian`] used when a
/// query point is pulled back through the current pose estimate rather than
/// pushed forward by it.
pub fn inverse_transform_jacobian(p: &EulerPose, x: &Vector3<f64>) -> PoseJacobian {
    let r = rz_matrix(p.rz) * ry_matrix(p.ry) * rx_matrix(p.rx);
    let dr = rotation_derivatives(p);
    let u = x - p.translation();
    let mut j = PoseJacobian::zeros();
    for (k, d) in dr.iter().enumerate() {
        j.set_column(k, &(d.transpose() * u));
    }
    let neg_rt = -r.transpose();
    for k in 0..3 {
        j.set_column(3 + k, &neg_rt.column(k).into_owned());
    }
    j
}

/// Rotation and translation error between two poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    /// Geodesic rotation distance in degrees.
    pub rot_deg: f64,
    /// Euclidean translation distance in millimeters.
    pub trans_mm: f64,
}

/// Geodesic angle (radians) of a rotation matrix.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Pose error between two rigid transforms: geodesic angle of
/// `R_est · R_gtᵀ` in degrees and `‖t_est − t_gt‖` in millimeters.
pub fn pose_error_matrices(est: &RigidTransform, gt: &RigidTransform) -> PoseError {
    let rel = est.rotation * gt.rotation.transpose();
    PoseError {
        rot_deg: rotation_angle(&rel).to_degrees(),
        trans_mm: (est.translation - gt.translation).norm() * 1000.0,
    }
}

/// Pose error between two Euler poses; see [`pose_error_matrices`].
pub fn pose_error(est: &EulerPose, gt: &EulerPose) -> PoseError {
    let a = pose_to_matrix(est).expect("finite pose");
    let b = pose_to_matrix(gt).expect("finite pose");
    pose_error_matrices(&a, &b)
}

/// Recovers `(rx, ry, rz)` from a rotation matrix in the crate's convention.
///
/// Valid away from the gimbal-lock configuration `|ry| = π/2`; all poses
/// handled by this crate stay well inside that range.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let sy = -r[(2, 0)];
    let ry = sy.clamp(-1.0, 1.0).asin();
    if sy.abs() < 1.0 - 1e-12 {
        let rx = r[(2, 1)].atan2(r[(2, 2)]);
        let rz = r[(1, 0)].atan2(r[(0, 0)]);
        (rx, ry, rz)
    } else {
        // gimbal lock: rz is unobservable, fold it into rx
        let rx = (-r[(1, 2)]).atan2(r[(1, 1)]);
        (rx, ry, 0.0)
    }
}

/// Converts a rigid transform back to an Euler pose.
pub fn matrix_to_pose(t: &RigidTransform) -> EulerPose {
    let (rx, ry, rz) = matrix_to_euler(&t.rotation);
    EulerPose::new(
        rx,
        ry,
        rz,
        t.translation.x,
        t.translation.y,
        t.translation.z,
    )
}
