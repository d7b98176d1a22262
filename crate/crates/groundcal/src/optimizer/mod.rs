//! Sliding-window refinement of relative camera poses and the ground plane,
//! plus everything that turns the refined plane into a broadcastable
//! calibration: homography transfer residuals, camera-to-ground rotation
//! assembly, rotation/translation averaging, a componentwise Z-test gate
//! and failure detection.
//!
//! The window cost couples per-pair relative motions `x_k` with one shared
//! plane state `x_s = (g_s, h_s)` through the plane-induced homography
//!
//! ```text
//! H_k = K * dR_k * (I + d_k * g_s^T / h_s) * K^{-1}
//! ```
//!
//! (`d_k` is the camera displacement over the pair, expressed in the
//! earlier frame). Residuals are Huber-robustified pixel transfer errors,
//! marginalized history enters as a linear prior; see [`window`].

pub mod window;

use nalgebra::{Matrix3, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{euler_zyx, CameraIntrinsics, GroundPlaneEstimate, RigidTransform};
use crate::odometry::{MotionFrame, RelativeMotion};

pub use window::{marginalize, optimize_window, MarginalPrior, PairObservations, SolveStats, WindowState};

/// Six-vector `[roll, pitch, yaw, tx, ty, tz]`.
pub type Xi = SVector<f64, 6>;

#[derive(Debug, Error, PartialEq)]
pub enum OptimizerError {
    #[error("homography maps the point to infinity")]
    PointAtInfinity,
    #[error("solver diverged: {0} consecutive damped steps increased the cost")]
    SolverDiverged(u32),
    #[error("pair {pair} has {got} ground matches, need at least {need}")]
    InsufficientFeatures { pair: usize, got: usize, need: usize },
    #[error("marginalization block is rank deficient")]
    SingularBlock,
    #[error("translation and normal are too close to parallel")]
    DegenerateGeometry,
    #[error("rotation sum is rank deficient")]
    RankDeficientSum,
}

/// Configuration of the window optimizer and the reporting gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Number of keyframe pairs kept in the sliding window.
    pub window_size: usize,
    /// Number of per-window calibrations averaged into one report sample.
    pub averaging_window: usize,
    /// Huber loss threshold in sigma-normalized pixels.
    pub huber_delta: f64,
    pub max_iterations: u32,
    /// Relative cost-decrease threshold that stops the solver.
    pub convergence_tol: f64,
    /// Z-test significance level.
    pub alpha: f64,
    /// Z-test target vector (see the pipeline for how it is maintained).
    pub xi_d: [f64; 6],
    /// Isotropic feature measurement sigma, pixels.
    pub feature_cov_px: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            averaging_window: 20,
            huber_delta: 1.345,
            max_iterations: 50,
            convergence_tol: 1e-12,
            alpha: 0.05,
            xi_d: [0.0; 6],
            feature_cov_px: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_size < 2 {
            return Err("window_size must be at least 2".into());
        }
        if self.averaging_window < 1 {
            return Err("averaging_window must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err("alpha must lie in (0, 1)".into());
        }
        if !(self.huber_delta > 0.0 && self.feature_cov_px > 0.0) {
            return Err("huber_delta and feature_cov_px must be positive".into());
        }
        Ok(())
    }
}

/// A camera-to-ground calibration with its reporting status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Camera-to-ground rotation.
    pub rotation: Matrix3<f64>,
    /// Camera-to-ground translation, meters.
    pub translation: Vector3<f64>,
    /// `[roll, pitch, yaw, tx, ty, tz]`, radians and meters.
    pub xi: [f64; 6],
    /// Number of averaged window solutions behind this result.
    pub sample_count: usize,
    /// Whether the Z-test gate allowed broadcasting it.
    pub reported: bool,
}

impl CalibrationResult {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        sample_count: usize,
        reported: bool,
    ) -> Self {
        let e = euler_zyx(&rotation);
        Self {
            rotation,
            translation,
            xi: [e.x, e.y, e.z, translation.x, translation.y, translation.z],
            sample_count,
            reported,
        }
    }

    pub fn xi_vector(&self) -> Xi {
        Xi::from_column_slice(&self.xi)
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.translation)
    }
}

/// Plane-induced homography transferring pixels of keyframe k into k+1.
pub fn homography(
    motion: &RelativeMotion,
    plane: &GroundPlaneEstimate,
    intr: &CameraIntrinsics,
) -> Matrix3<f64> {
    debug_assert_eq!(motion.frame, MotionFrame::Camera);
    debug_assert!(plane.height > 0.0);
    let k = intr.matrix();
    let k_inv = intr.inverse_matrix();
    let core = Matrix3::identity() + motion.translation * plane.normal.transpose() / plane.height;
    k * motion.rotation * core * k_inv
}

/// Pixel transfer residual `p_{k+1} - dehomogenize(H * p_k)`.
pub fn transfer_residual(
    h: &Matrix3<f64>,
    p_k: &Vector2<f64>,
    p_k1: &Vector2<f64>,
) -> Result<Vector2<f64>, OptimizerError> {
    let q = h * Vector3::new(p_k.x, p_k.y, 1.0);
    if q.z.abs() < 1e-12 {
        return Err(OptimizerError::PointAtInfinity);
    }
    Ok(Vector2::new(p_k1.x - q.x / q.z, p_k1.y - q.y / q.z))
}

/// Assembles the camera-to-ground rotation from the optimized plane normal
/// and driving direction.
///
/// Gram–Schmidt: the unit driving direction becomes the ground x axis, the
/// normal component of `g_star` orthogonal to it becomes the ground z axis,
/// and y completes the right-handed triad. Rows of the result express the
/// ground axes in camera coordinates, so the third row is the unit ground
/// normal.
pub fn build_rotation(
    g_star: &Vector3<f64>,
    t_star: &Vector3<f64>,
) -> Result<Matrix3<f64>, OptimizerError> {
    let t_norm = t_star.norm();
    if t_norm <= 1e-9 {
        return Err(OptimizerError::DegenerateGeometry);
    }
    let n_x = t_star / t_norm;
    let g_unit = g_star.normalize();
    if g_unit.cross(&n_x).norm() < 1e-6 {
        return Err(OptimizerError::DegenerateGeometry);
    }
    let n_z = (g_star - n_x * g_star.dot(&n_x)).normalize();
    let n_y = n_z.cross(&n_x);
    Ok(Matrix3::from_rows(&[
        n_x.transpose(),
        n_y.transpose(),
        n_z.transpose(),
    ]))
}

/// Chordal mean of rotations: the closed-form projection of the rotation sum
/// back onto SO(3) via SVD, with the sign chosen so the result is a proper
/// rotation (determinant +1).
pub fn average_rotations(rotations: &[Matrix3<f64>]) -> Result<Matrix3<f64>, OptimizerError> {
    assert!(!rotations.is_empty(), "need at least one rotation");
    let sum: Matrix3<f64> = rotations.iter().sum();
    let svd = sum.svd(true, true);
    if svd.singular_values[1] < 1e-9 {
        return Err(OptimizerError::RankDeficientSum);
    }
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let sign = (u * vt).determinant().signum();
    Ok(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * vt)
}

/// Arithmetic mean of translations.
pub fn average_translations(translations: &[Vector3<f64>]) -> Vector3<f64> {
    assert!(!translations.is_empty(), "need at least one translation");
    translations.iter().sum::<Vector3<f64>>() / translations.len() as f64
}

/// Componentwise Z-test outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTestResult {
    /// Test statistic per component.
    pub z: [f64; 6],
    /// Two-sided critical value at the configured significance level.
    pub critical: f64,
    /// True when every component fails to reject the null hypothesis.
    pub report: bool,
}

/// Componentwise Z-test of the sample mean against the target `xi_d`.
///
/// `z_i = (mean_i - xi_d_i) / sqrt(S_ii / N)` with `S` the unbiased sample
/// covariance diagonal, floored at 1e-12 so a fully converged (zero
/// variance) estimator on target still reports. The decision is
/// `|z| < Phi^{-1}(1 - alpha/2)` in every component.
pub fn z_test(samples: &[Xi], xi_d: &Xi, alpha: f64) -> ZTestResult {
    assert!(samples.len() >= 2, "z-test needs at least two samples");
    assert!(alpha > 0.0 && alpha < 1.0);
    let n = samples.len() as f64;
    let mean: Xi = samples.iter().sum::<Xi>() / n;
    let mut var = Xi::zeros();
    for s in samples {
        let d = s - mean;
        var += d.component_mul(&d);
    }
    var /= n - 1.0;

    let critical = inverse_normal_cdf(1.0 - alpha / 2.0);
    let mut z = [0.0; 6];
    let mut report = true;
    for i in 0..6 {
        let sigma = (var[i].max(1e-12) / n).sqrt();
        z[i] = (mean[i] - xi_d[i]) / sigma;
        report &= z[i].abs() < critical;
    }
    ZTestResult {
        z,
        critical,
        report,
    }
}

/// Inverse standard-normal CDF (Acklam's rational approximation, about
/// 1e-9 absolute error over the open unit interval).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    const A: [f64; 6] = [
        -39.696830286653757,
        220.94609842452050,
        -275.92851044696869,
        138.35775186726900,
        -30.664798066147160,
        2.5066282774592392,
    ];
    const B: [f64; 5] = [
        -54.476098798224058,
        161.58583685804089,
        -155.69897985988661,
        66.801311887719720,
        -13.280681552885721,
    ];
    const C: [f64; 6] = [
        -0.0077848940024302926,
        -0.32239645804113648,
        -2.4007582771618381,
        -2.5497325393437338,
        4.3746641414649678,
        2.9381639826987831,
    ];
    const D: [f64; 4] = [
        0.0077846957090414622,
        0.32246712907003983,
        2.4451341556158431,
        3.7544086619074162,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |p: f64| -> f64 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    if p < P_LOW {
        tail(p)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(1.0 - p)
    }
}

/// Why the estimator was reinitialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    /// Implausible inter-keyframe rotation or position step.
    MotionJump,
    /// Too few verified ground features in the new keyframe pair.
    TooFewFeatures,
    /// Plane normal or height changed too much against the running estimate.
    PlaneJump,
    /// Not enough triangulated points for a plane fit.
    TooFewTriangulated,
    /// The fitted plane failed the motion/height quality gates.
    PlaneQualityFailed,
}

/// Failure detection limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureThresholds {
    /// Max rotation between consecutive keyframes, radians.
    pub max_rotation_step: f64,
    /// Max displacement between consecutive keyframes, meters.
    pub max_translation_step: f64,
    pub min_ground_features: usize,
    /// Max angle between the fitted and the running plane normal, radians.
    pub max_normal_change: f64,
    /// Max height difference between the fitted and the running plane, meters.
    pub max_height_change: f64,
    pub min_triangulated: usize,
}

impl Default for FailureThresholds {
    fn default() -> Self {
        Self {
            max_rotation_step: 10.0f64.to_radians(),
            max_translation_step: 3.0,
            min_ground_features: 8,
            max_normal_change: 2.0f64.to_radians(),
            max_height_change: 0.05,
            min_triangulated: 4,
        }
    }
}

/// Per-keyframe estimator output consumed by failure detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Relative rotation magnitude of the accepted pose, radians.
    pub rotation_step: f64,
    /// Displacement magnitude of the accepted pose, meters.
    pub translation_step: f64,
    /// Verified ground features in this pair.
    pub ground_feature_count: usize,
    /// Ground features that triangulated cleanly.
    pub triangulated_count: usize,
    /// Fresh plane fit of this pair, when one was possible.
    pub plane: Option<GroundPlaneEstimate>,
    /// Running plane estimate it is compared against.
    pub reference_plane: Option<GroundPlaneEstimate>,
    /// Outcome of the plane quality gates, when a fit existed.
    pub plane_quality_ok: Option<bool>,
}

/// Checks the paper's five failure criteria in order and returns the first
/// one triggered.
pub fn detect_failure(
    diag: &StepDiagnostics,
    limits: &FailureThresholds,
) -> Option<FailureReason> {
    if diag.rotation_step > limits.max_rotation_step
        || diag.translation_step > limits.max_translation_step
    {
        return Some(FailureReason::MotionJump);
    }
    if diag.ground_feature_count < limits.min_ground_features {
        return Some(FailureReason::TooFewFeatures);
    }
    if let (Some(plane), Some(reference)) = (&diag.plane, &diag.reference_plane) {
        let angle = plane.normal.cross(&reference.normal).norm().asin();
        if angle > limits.max_normal_change
            || (plane.height - reference.height).abs() > limits.max_height_change
        {
            return Some(FailureReason::PlaneJump);
        }
    }
    if diag.triangulated_count < limits.min_triangulated {
        return Some(FailureReason::TooFewTriangulated);
    }
    if diag.plane_quality_ok == Some(false) {
        return Some(FailureReason::PlaneQualityFailed);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{backproject, exp_so3, project, rotation_angle, rotation_from_euler_zyx};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(400.0, 400.0, 406.0, 270.0, 812, 540)
    }

    fn ground_plane() -> GroundPlaneEstimate {
        GroundPlaneEstimate {
            normal: Vector3::new(0.0, -1.0, 0.0),
            height: 1.6,
            inlier_count: 0,
        }
    }

    fn forward_motion(step: f64) -> RelativeMotion {
        RelativeMotion {
            rotation: rotation_from_euler_zyx(0.002, -0.001, 0.0015),
            translation: Vector3::new(0.004, -0.002, step),
            frame: MotionFrame::Camera,
        }
    }

    #[test]
    fn homography_trivial_cases() {
        let plane = ground_plane();
        let id = RelativeMotion::identity(MotionFrame::Camera);
        let h = homography(&id, &plane, &intr());
        assert_relative_eq!(h, Matrix3::identity(), epsilon = 1e-12);

        // Zero translation: pure conjugated rotation.
        let rot_only = RelativeMotion {
            rotation: rotation_from_euler_zyx(0.01, 0.02, -0.03),
            translation: Vector3::zeros(),
            frame: MotionFrame::Camera,
        };
        let h = homography(&rot_only, &plane, &intr());
        let expected = intr().matrix() * rot_only.rotation * intr().inverse_matrix();
        assert_relative_eq!(h, expected, epsilon = 1e-12);
    }

    #[test]
    fn homography_transfers_ground_points_exactly() {
        let plane = ground_plane();
        let motion = forward_motion(0.6);
        let h = homography(&motion, &plane, &intr());
        for (u, v) in [(120.0, 320.0), (406.0, 450.0), (700.0, 360.0), (250.0, 530.0)] {
            let ray = backproject(&Vector2::new(u, v), &intr());
            let depth = plane.height / ray.dot(&plane.normal).abs();
            let point = ray * depth;
            let observed = project(&motion.transport_point(&point), &intr()).unwrap();
            let r = transfer_residual(&h, &Vector2::new(u, v), &observed).unwrap();
            assert!(r.norm() < 1e-9, "transfer error {} at ({u}, {v})", r.norm());
        }
    }

    #[test]
    fn transfer_residual_closed_forms() {
        let h = Matrix3::identity();
        let r = transfer_residual(&h, &Vector2::new(10.0, 20.0), &Vector2::new(13.0, 24.0)).unwrap();
        assert_eq!(r, Vector2::new(3.0, 4.0));

        // Independent symbolic evaluation for a random-ish H.
        let h = Matrix3::new(1.1, 0.02, -3.0, -0.01, 0.97, 2.5, 1e-4, -2e-4, 1.0);
        let (u, v) = (203.0, 404.0);
        let w = 1e-4 * u - 2e-4 * v + 1.0;
        let expected = Vector2::new(
            500.0 - (1.1 * u + 0.02 * v - 3.0) / w,
            400.0 - (-0.01 * u + 0.97 * v + 2.5) / w,
        );
        let got = transfer_residual(&h, &Vector2::new(u, v), &Vector2::new(500.0, 400.0)).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);

        let singular = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(
            transfer_residual(&singular, &Vector2::new(1.0, 1.0), &Vector2::new(0.0, 0.0)),
            Err(OptimizerError::PointAtInfinity)
        );
    }

    #[test]
    fn build_rotation_canonical_camera() {
        // Forward camera: driving direction along +z, ground normal along -y.
        let r = build_rotation(&Vector3::new(0.0, -1.0, 0.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(r * Vector3::z(), Vector3::x(), epsilon = 1e-12);
        assert_relative_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        // Third row is the unit normal.
        assert_relative_eq!(
            Vector3::new(r[(2, 0)], r[(2, 1)], r[(2, 2)]),
            Vector3::new(0.0, -1.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn build_rotation_orthogonal_input_keeps_normal() {
        let g = Vector3::new(0.12, -0.9, 0.05).normalize();
        // Pick t exactly orthogonal to g.
        let t = g.cross(&Vector3::z()).normalize();
        let r = build_rotation(&g, &t).unwrap();
        assert_relative_eq!(
            Vector3::new(r[(2, 0)], r[(2, 1)], r[(2, 2)]),
            g,
            epsilon = 1e-12
        );
    }

    #[test]
    fn build_rotation_properties_and_idempotence() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..100 {
            let g = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..-0.2),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let t = Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(0.5..1.0),
            );
            if g.cross(&t.normalize()).norm() < 1e-3 {
                continue;
            }
            let r = build_rotation(&g, &t).unwrap();
            assert_relative_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-12);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
            let row3 = Vector3::new(r[(2, 0)], r[(2, 1)], r[(2, 2)]);
            assert!(row3.dot(&g) > 0.0);
            // Feeding back rows 3 and 1 reproduces the rotation.
            let row1 = Vector3::new(r[(0, 0)], r[(0, 1)], r[(0, 2)]);
            let again = build_rotation(&row3, &row1).unwrap();
            assert_relative_eq!(again, r, epsilon = 1e-12);
        }
    }

    #[test]
    fn build_rotation_rejects_degenerate_input() {
        let g = Vector3::new(0.0, -1.0, 0.0);
        assert_eq!(
            build_rotation(&g, &Vector3::zeros()),
            Err(OptimizerError::DegenerateGeometry)
        );
        assert_eq!(
            build_rotation(&g, &(g * 2.0)),
            Err(OptimizerError::DegenerateGeometry)
        );
    }

    #[test]
    fn average_rotations_exact_cases() {
        let r = rotation_from_euler_zyx(0.3, -0.2, 1.0);
        let avg = average_rotations(&[r, r, r, r]).unwrap();
        assert_relative_eq!(avg, r, epsilon = 1e-12);

        // Symmetric pair about r.
        let w = Vector3::new(0.02, -0.04, 0.03);
        let pair = [r * exp_so3(&w), r * exp_so3(&-w)];
        let avg = average_rotations(&pair).unwrap();
        assert!(rotation_angle(&avg, &r) < 1e-10);
    }

    /// Multi-resolution grid refinement of the chordal mean, used as an
    /// independent oracle.
    fn chordal_mean_grid(rotations: &[Matrix3<f64>], start: &Matrix3<f64>) -> Matrix3<f64> {
        let cost = |r: &Matrix3<f64>| -> f64 {
            rotations.iter().map(|s| (s - r).norm_squared()).sum::<f64>()
        };
        let mut center = *start;
        let mut span = 0.02;
        for _ in 0..24 {
            let mut best = (cost(&center), center);
            for dx in [-span, 0.0, span] {
                for dy in [-span, 0.0, span] {
                    for dz in [-span, 0.0, span] {
                        let cand = center * exp_so3(&Vector3::new(dx, dy, dz));
                        let c = cost(&cand);
                        if c < best.0 {
                            best = (c, cand);
                        }
                    }
                }
            }
            center = best.1;
            span *= 0.7;
        }
        center
    }

    #[test]
    fn average_rotations_matches_grid_oracle_under_noise() {
        let truth = rotation_from_euler_zyx(0.2, -0.1, 0.5);
        let mut rng = StdRng::seed_from_u64(15);
        // Isotropic noise with 0.5 degrees RMS magnitude.
        let sigma = 0.5f64.to_radians() / 3.0f64.sqrt();
        let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
        let rotations: Vec<Matrix3<f64>> = (0..100)
            .map(|_| {
                let w = Vector3::new(
                    rng.sample::<f64, _>(normal),
                    rng.sample::<f64, _>(normal),
                    rng.sample::<f64, _>(normal),
                );
                truth * exp_so3(&w)
            })
            .collect();
        let avg = average_rotations(&rotations).unwrap();
        assert!(rotation_angle(&avg, &truth) < 0.05f64.to_radians());
        let oracle = chordal_mean_grid(&rotations, &truth);
        assert!(rotation_angle(&avg, &oracle) < 0.01f64.to_radians());
    }

    #[test]
    fn average_rotations_is_order_and_conjugation_invariant() {
        let mut rng = StdRng::seed_from_u64(13);
        let base = rotation_from_euler_zyx(-0.4, 0.3, 0.9);
        let mut rotations: Vec<Matrix3<f64>> = (0..20)
            .map(|_| {
                base * exp_so3(&Vector3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                ))
            })
            .collect();
        let a = average_rotations(&rotations).unwrap();
        rotations.reverse();
        rotations.swap(3, 11);
        let b = average_rotations(&rotations).unwrap();
        assert!(rotation_angle(&a, &b) < 1e-12);

        let q = rotation_from_euler_zyx(1.0, 0.2, -0.7);
        let conjugated: Vec<Matrix3<f64>> =
            rotations.iter().map(|r| q * r * q.transpose()).collect();
        let c = average_rotations(&conjugated).unwrap();
        assert!(rotation_angle(&c, &(q * b * q.transpose())) < 1e-10);
    }

    #[test]
    fn average_rotations_rank_deficient_sum() {
        // Two yaws half a turn apart cancel in the xy block.
        let sum_degenerate = [
            rotation_from_euler_zyx(0.0, 0.0, 0.0),
            rotation_from_euler_zyx(0.0, 0.0, std::f64::consts::PI),
        ];
        assert_eq!(
            average_rotations(&sum_degenerate),
            Err(OptimizerError::RankDeficientSum)
        );
    }

    #[test]
    fn average_translations_cases() {
        let single = [Vector3::new(1.0, 2.0, 3.0)];
        assert_eq!(average_translations(&single), single[0]);
        let pair = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 3.0)];
        assert_eq!(average_translations(&pair), Vector3::new(0.0, 0.0, 2.0));

        let mut rng = StdRng::seed_from_u64(3);
        let set: Vec<Vector3<f64>> = (0..37)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect();
        let mut acc = Vector3::zeros();
        for v in &set {
            acc += v;
        }
        assert_relative_eq!(average_translations(&set), acc / 37.0, epsilon = 1e-12);
    }

    /// High-precision erf by series, for the independent critical-value oracle.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    fn normal_cdf_oracle(x: f64) -> f64 {
        0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
    }

    #[test]
    fn inverse_normal_cdf_matches_erf_oracle() {
        // Bisection on the series CDF as the reference.
        for p in [0.5, 0.6, 0.9, 0.95, 0.975, 0.995, 0.9995, 0.025, 0.001] {
            let (mut lo, mut hi) = (-8.0, 8.0);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if normal_cdf_oracle(mid) < p {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let oracle = 0.5 * (lo + hi);
            // Acklam's approximation is good to about 1e-9 relative error,
            // which leaves ~2e-8 absolute in the far tail.
            assert!(
                (inverse_normal_cdf(p) - oracle).abs() < 5e-8,
                "p = {p}: {} vs {oracle}",
                inverse_normal_cdf(p)
            );
        }
        // The standard two-sided 5% critical value.
        assert!((inverse_normal_cdf(0.975) - 1.959964).abs() < 1e-6);
    }

    #[test]
    fn z_test_decisions() {
        let xi_d = Xi::from_column_slice(&[0.1, -0.2, 0.3, 1.0, 2.0, 3.0]);
        // All samples exactly on target: z = 0, report.
        let samples = vec![xi_d; 5];
        let res = z_test(&samples, &xi_d, 0.05);
        assert_eq!(res.z, [0.0; 6]);
        assert!(res.report);

        // One component offset by 10 sigma: rejected.
        let mut rng = StdRng::seed_from_u64(8);
        let sigma = 0.01;
        let mut offset_samples = Vec::new();
        for _ in 0..40 {
            let mut s = xi_d;
            for i in 0..6 {
                s[i] += rng.gen_range(-sigma..sigma);
            }
            s[2] += 10.0 * sigma;
            offset_samples.push(s);
        }
        let res = z_test(&offset_samples, &xi_d, 0.05);
        assert!(!res.report);
        assert!(res.z[2].abs() > res.critical);
    }

    #[test]
    fn z_test_matches_statistical_table_decision() {
        // Hand-built samples with known mean and variance: mean 0.5, sample
        // sd exactly sqrt(1/3) over {0, 0.5, 1.0, 0.5}... use a simple set.
        let mut samples = Vec::new();
        for v in [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0] {
            let mut s = Xi::zeros();
            s[0] = v;
            samples.push(s);
        }
        // mean 0.5, unbiased var = 2/7, n = 8 -> z = 0.5 / sqrt((2/7)/8).
        let expected_z = 0.5 / ((2.0 / 7.0f64) / 8.0).sqrt();
        let res = z_test(&samples, &Xi::zeros(), 0.05);
        assert_relative_eq!(res.z[0], expected_z, epsilon = 1e-12);
        assert!((res.critical - 1.959964).abs() < 1e-6);
        assert!(!res.report, "z = {} exceeds 1.96", expected_z);

        // Same data, much wider alpha keeps it only if critical grows.
        let res_loose = z_test(&samples, &Xi::zeros(), 1e-4);
        assert!(res_loose.critical > expected_z);
        assert!(res_loose.report);
    }

    #[test]
    fn z_test_zero_variance_and_scale_consistency() {
        // Fully converged estimator exactly on target: floor keeps z finite.
        let on_target = vec![Xi::from_element(2.0); 4];
        let res = z_test(&on_target, &Xi::from_element(2.0), 0.05);
        assert!(res.report);

        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..20 {
            let base: Vec<Xi> = (0..10)
                .map(|_| {
                    Xi::from_fn(|_, _| rng.gen_range(0.9..1.1))
                })
                .collect();
            let xi_d = Xi::from_element(1.0);
            let scale = rng.gen_range(0.5..20.0);
            let scaled: Vec<Xi> = base.iter().map(|s| s * scale).collect();
            let a = z_test(&base, &xi_d, 0.05);
            let b = z_test(&scaled, &(xi_d * scale), 0.05);
            assert_eq!(a.report, b.report);
        }
    }

    #[test]
    fn calibration_result_xi_is_consistent() {
        let rot = rotation_from_euler_zyx(0.1, -0.2, 0.3);
        let t = Vector3::new(1.4, 0.02, 1.62);
        let res = CalibrationResult::new(rot, t, 7, true);
        assert_relative_eq!(res.xi[0], 0.1, epsilon = 1e-12);
        assert_relative_eq!(res.xi[1], -0.2, epsilon = 1e-12);
        assert_relative_eq!(res.xi[2], 0.3, epsilon = 1e-12);
        let rebuilt = rotation_from_euler_zyx(res.xi[0], res.xi[1], res.xi[2]);
        assert_relative_eq!(rebuilt, rot, epsilon = 1e-12);
    }

    #[test]
    fn detect_failure_criteria_and_order() {
        let nominal_plane = GroundPlaneEstimate {
            normal: Vector3::new(0.0, -1.0, 0.0),
            height: 1.6,
            inlier_count: 40,
        };
        let good = StepDiagnostics {
            rotation_step: 0.002,
            translation_step: 0.5,
            ground_feature_count: 35,
            triangulated_count: 30,
            plane: Some(nominal_plane),
            reference_plane: Some(nominal_plane),
            plane_quality_ok: Some(true),
        };
        let limits = FailureThresholds::default();
        assert_eq!(detect_failure(&good, &limits), None);

        assert_eq!(
            detect_failure(
                &StepDiagnostics {
                    rotation_step: 0.5,
                    ..good
                },
                &limits
            ),
            Some(FailureReason::MotionJump)
        );
        assert_eq!(
            detect_failure(
                &StepDiagnostics {
                    ground_feature_count: 3,
                    ..good
                },
                &limits
            ),
            Some(FailureReason::TooFewFeatures)
        );
        // An 8 cm pothole-style height jump.
        let jumped = GroundPlaneEstimate {
            height: 1.68,
            ..nominal_plane
        };
        assert_eq!(
            detect_failure(
                &StepDiagnostics {
                    plane: Some(jumped),
                    ..good
                },
                &limits
            ),
            Some(FailureReason::PlaneJump)
        );
        assert_eq!(
            detect_failure(
                &StepDiagnostics {
                    triangulated_count: 2,
                    ..good
                },
                &limits
            ),
            Some(FailureReason::TooFewTriangulated)
        );
        assert_eq!(
            detect_failure(
                &StepDiagnostics {
                    plane_quality_ok: Some(false),
                    ..good
                },
                &limits
            ),
            Some(FailureReason::PlaneQualityFailed)
        );
        // Ordering: a motion jump wins over later criteria.
        assert_eq!(
            detect_failure(
                &StepDiagnostics {
                    rotation_step: 1.0,
                    ground_feature_count: 0,
                    plane_quality_ok: Some(false),
                    ..good
                },
                &limits
            ),
            Some(FailureReason::MotionJump)
        );
    }
}
