//! Core geometry: rigid transforms, the pinhole camera, two-view
//! triangulation and total-least-squares plane fitting.
//!
//! Conventions used throughout the crate:
//!
//! * A [`RigidTransform`] maps point coordinates from its *source* frame to
//!   its *destination* frame: `p_dst = R * p_src + t`.
//! * Camera frames are right-handed with `z` along the optical axis
//!   (forward), `x` along the sensor rows (right) and `y` along the sensor
//!   columns (down).
//! * Ground normals are expressed in the camera frame and oriented so the
//!   camera center lies on the positive side; a point `P` on the ground
//!   plane then satisfies `n · P = -h` with `h > 0` the camera height.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the geometric primitives.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeomError {
    /// Projection was requested for a point at or behind the image plane.
    #[error("point has non-positive depth")]
    NonPositiveDepth,
    /// Triangulation rays are parallel (match at or near the epipole).
    #[error("triangulation rays are parallel")]
    DegenerateRays,
    /// Triangulated point lies behind one of the cameras.
    #[error("triangulated point lies behind a camera")]
    NegativeDepth,
    /// Plane fitting needs at least three points.
    #[error("plane fit requires at least 3 points, got {0}")]
    InsufficientPoints(usize),
    /// Plane fitting input is collinear; the normal is not unique.
    #[error("plane fit points are collinear")]
    CollinearPoints,
}

/// Skew-symmetric matrix of `v`, so that `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential map (Rodrigues), with a second-order Taylor expansion
/// below 1e-8 rad so standstill integration stays stable.
pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    if theta < 1e-8 {
        Matrix3::identity() + w + w * w * 0.5
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Matrix3::identity() + w * a + w * w * b
    }
}

/// SO(3) logarithm; inverse of [`exp_so3`] for rotation angles in `[0, pi]`.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let axis_raw = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < 1e-8 {
        return axis_raw * 0.5;
    }
    if (std::f64::consts::PI - theta) < 1e-6 {
        // Near pi the antisymmetric part vanishes; recover the axis from the
        // symmetric part R + I.
        let m = r + Matrix3::identity();
        let col = (0..3)
            .map(|i| m.column(i).norm())
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap();
        let mut axis = m.column(col).normalize();
        // Fix the sign so exp(theta * axis) reproduces the antisymmetric part.
        if axis_raw.dot(&axis) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    axis_raw * (theta / (2.0 * theta.sin()))
}

/// Rotation angle in radians between two rotation matrices.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    log_so3(&(a.transpose() * b)).norm()
}

/// ZYX Euler angles `(roll, pitch, yaw)` of `r`, i.e. `r = Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn euler_zyx(r: &Matrix3<f64>) -> Vector3<f64> {
    let rot = Rotation3::from_matrix_unchecked(*r);
    let (roll, pitch, yaw) = rot.euler_angles();
    Vector3::new(roll, pitch, yaw)
}

/// Builds the rotation `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    *Rotation3::from_euler_angles(roll, pitch, yaw).matrix()
}

/// A deterministic orthonormal basis of the plane orthogonal to unit `n`.
pub fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let pick = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let b1 = n.cross(&pick).normalize();
    let b2 = n.cross(&b1);
    (b1, b2)
}

/// SE(3) pose carrying points from a source frame into a destination frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Orthonormal rotation with determinant +1.
    pub rotation: Matrix3<f64>,
    /// Translation in meters: `p_dst = R * p_src + t`.
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    /// Composition `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Max deviation from orthonormality, `max |R Rᵀ - I|` plus `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation * self.rotation.transpose() - Matrix3::identity();
        e.abs().max() + (self.rotation.determinant() - 1.0).abs()
    }

    /// Projects the rotation back onto SO(3) through its polar factor.
    /// Useful after long composition chains.
    pub fn renormalized(&self) -> RigidTransform {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let d = (u * vt).determinant().signum();
        let rot = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
        RigidTransform {
            rotation: rot,
            translation: self.translation,
        }
    }

    pub fn as_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Pinhole intrinsics; images are assumed distortion-free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image dimensions must be positive".into());
        }
        Ok(())
    }
}

/// An image measurement tagged with its feature track identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    pub track_id: u64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64, track_id: u64) -> Self {
        Self { u, v, track_id }
    }

    pub fn coords(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }
}

/// A triangulated point on the road surface, in the observing camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPoint3D {
    /// Position in the camera frame of the earlier keyframe, meters.
    pub position: Vector3<f64>,
    /// Max of the two per-view reprojection errors, pixels.
    pub reprojection_error: f64,
}

/// Ground plane seen from the camera: unit normal plus camera height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlaneEstimate {
    /// Unit normal in the camera frame, pointing from the road toward the camera.
    pub normal: Vector3<f64>,
    /// Perpendicular camera-center-to-ground distance, meters. Positive.
    pub height: f64,
    /// Number of points that produced this estimate.
    pub inlier_count: usize,
}

impl GroundPlaneEstimate {
    /// Signed distance of a camera-frame point to the plane (0 on the plane).
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.height
    }
}

/// Pinhole projection of a camera-frame point.
///
/// `u = fx * x / z + cx`, `v = fy * y / z + cy`.
pub fn project(point: &Vector3<f64>, intr: &CameraIntrinsics) -> Result<Vector2<f64>, GeomError> {
    if point.z <= 1e-12 {
        return Err(GeomError::NonPositiveDepth);
    }
    let inv_z = 1.0 / point.z;
    Ok(Vector2::new(
        intr.fx * point.x * inv_z + intr.cx,
        intr.fy * point.y * inv_z + intr.cy,
    ))
}

/// Back-projects a pixel onto the unit plane; the third component is exactly 1.
pub fn backproject(pixel: &Vector2<f64>, intr: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new(
        (pixel.x - intr.cx) / intr.fx,
        (pixel.y - intr.cy) / intr.fy,
        1.0,
    )
}

/// Midpoint-of-common-perpendicular triangulation.
///
/// `relative_pose` maps coordinates of the first camera frame into the second
/// (`p2 = R * p1 + t`). The returned point is expressed in the first frame and
/// carries the max per-view reprojection error.
pub fn triangulate(
    p_k: &Vector2<f64>,
    p_k1: &Vector2<f64>,
    relative_pose: &RigidTransform,
    intr: &CameraIntrinsics,
) -> Result<GroundPoint3D, GeomError> {
    let d1 = backproject(p_k, intr).normalize();
    let d2 = (relative_pose.rotation.transpose() * backproject(p_k1, intr)).normalize();
    // Second camera center in the first frame.
    let c2 = -(relative_pose.rotation.transpose() * relative_pose.translation);

    if d1.cross(&d2).norm() < 1e-12 {
        return Err(GeomError::DegenerateRays);
    }

    // Closest points p1 = s*d1 and p2 = c2 + t*d2 of the two rays.
    let dot = d1.dot(&d2);
    let b1 = d1.dot(&c2);
    let b2 = d2.dot(&c2);
    let det = 1.0 - dot * dot;
    let s = (b1 - dot * b2) / det;
    let t = (dot * b1 - b2) / det;
    if s <= 0.0 || t <= 0.0 {
        return Err(GeomError::NegativeDepth);
    }

    let point = ((d1 * s) + (c2 + d2 * t)) * 0.5;
    let in_second = relative_pose.transform_point(&point);
    if point.z <= 0.0 || in_second.z <= 0.0 {
        return Err(GeomError::NegativeDepth);
    }

    let r1 = (project(&point, intr)? - p_k).norm();
    let r2 = (project(&in_second, intr)? - p_k1).norm();
    Ok(GroundPoint3D {
        position: point,
        reprojection_error: r1.max(r2),
    })
}

/// Total-least-squares plane fit through triangulated ground points.
///
/// The normal is the eigenvector of the smallest eigenvalue of the centered
/// scatter matrix, oriented so the camera origin sits on the positive side
/// (`height > 0`). Outlier rejection is the caller's job; every input point
/// participates.
pub fn fit_plane(points: &[GroundPoint3D]) -> Result<GroundPlaneEstimate, GeomError> {
    if points.len() < 3 {
        return Err(GeomError::InsufficientPoints(points.len()));
    }
    let n = points.len() as f64;
    let centroid = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.position)
        / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p.position - centroid;
        scatter += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(scatter);
    // Ascending order of eigenvalues.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    if (eig.eigenvalues[order[1]] - eig.eigenvalues[order[0]]).abs() < 1e-12 {
        return Err(GeomError::CollinearPoints);
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    normal.normalize_mut();
    // Height of the camera origin above the plane, along the normal.
    let mut height = -normal.dot(&centroid);
    if height < 0.0 {
        normal = -normal;
        height = -height;
    }
    Ok(GroundPlaneEstimate {
        normal,
        height,
        inlier_count: points.len(),
    })
}
