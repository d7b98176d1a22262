//! Calibration quality metrics: single-camera feature transfer error,
//! cross-camera epipolar residual error, and mean deltas against scheduled
//! ground truth.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::geom::{euler_zyx, skew, CameraIntrinsics, RigidTransform};
use crate::optimizer::transfer_residual;
use crate::pipeline::report::{DeltaStats, ReportEvent};
use crate::sim::{CrossMatch, Scenario};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("transfer error needs a non-empty feature set")]
    EmptySet,
    #[error("residual error needs at least one cross-camera match")]
    EmptyMatches,
    #[error("scenario has no second camera")]
    NoSecondCamera,
}

/// Mean transfer residual norm of a feature set under a homography, pixels.
pub fn metric_transfer_error(
    h: &Matrix3<f64>,
    matches: &[(Vector2<f64>, Vector2<f64>)],
) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pk, pk1) in matches {
        if let Ok(r) = transfer_residual(h, pk, pk1) {
            sum += r.norm();
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptySet);
    }
    Ok(sum / n as f64)
}

/// Fundamental matrix mapping front-camera pixels to epipolar lines in the
/// second camera, from the two camera-to-ground transforms.
pub fn cross_camera_fundamental(
    front_ground_from_cam: &RigidTransform,
    second_ground_from_cam: &RigidTransform,
    front_intr: &CameraIntrinsics,
    second_intr: &CameraIntrinsics,
) -> Matrix3<f64> {
    // Front-camera coordinates -> ground -> second-camera coordinates.
    let second_from_front = second_ground_from_cam
        .inverse()
        .compose(front_ground_from_cam);
    second_intr.inverse_matrix().transpose()
        * skew(&second_from_front.translation)
        * second_from_front.rotation
        * front_intr.inverse_matrix()
}

fn point_line_distance(p: &Vector2<f64>, line: &Vector3<f64>) -> f64 {
    (line.x * p.x + line.y * p.y + line.z).abs()
        / (line.x * line.x + line.y * line.y).sqrt().max(1e-12)
}

/// Mean symmetric squared point-to-epipolar-line distance over cross-camera
/// matches, in squared pixels.
pub fn metric_residual_error(
    matches: &[CrossMatch],
    front_ground_from_cam: &RigidTransform,
    second_ground_from_cam: &RigidTransform,
    front_intr: &CameraIntrinsics,
    second_intr: &CameraIntrinsics,
) -> Result<f64, MetricsError> {
    if matches.is_empty() {
        return Err(MetricsError::EmptyMatches);
    }
    let f_q = cross_camera_fundamental(
        front_ground_from_cam,
        second_ground_from_cam,
        front_intr,
        second_intr,
    );
    let mut sum = 0.0;
    for m in matches {
        let line_in_second = f_q * m.front.homogeneous();
        let line_in_front = f_q.transpose() * m.second.homogeneous();
        let d_q = point_line_distance(&m.second.coords(), &line_in_second);
        let d_p = point_line_distance(&m.front.coords(), &line_in_front);
        sum += d_q * d_q + d_p * d_p;
    }
    Ok(sum / matches.len() as f64)
}

/// Mean absolute per-axis Euler and height differences between reported
/// calibrations and the truth active at each report time.
pub fn compare_to_truth(events: &[ReportEvent], scenario: &Scenario) -> Option<DeltaStats> {
    if events.is_empty() {
        return None;
    }
    let mut acc = [0.0f64; 4];
    for event in events {
        let truth = scenario.truth.ground_from_cam_at(event.timestamp);
        let truth_euler = euler_zyx(&truth.rotation);
        acc[0] += (event.xi[0] - truth_euler.x).abs();
        acc[1] += (event.xi[1] - truth_euler.y).abs();
        acc[2] += (event.xi[2] - truth_euler.z).abs();
        acc[3] += (event.xi[5] - truth.translation.z).abs();
    }
    let n = events.len() as f64;
    Some(DeltaStats {
        roll_deg: (acc[0] / n).to_degrees(),
        pitch_deg: (acc[1] / n).to_degrees(),
        yaw_deg: (acc[2] / n).to_degrees(),
        height_cm: acc[3] / n * 100.0,
        samples: events.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project, rotation_from_euler_zyx, PixelPoint};
    use crate::sim::{generate, ScenarioConfig};
    use approx::assert_relative_eq;

    #[test]
    fn transfer_error_closed_forms() {
        let id = Matrix3::identity();
        let matches = vec![
            (Vector2::new(10.0, 10.0), Vector2::new(10.0, 10.0)),
            (Vector2::new(50.0, 90.0), Vector2::new(50.0, 90.0)),
        ];
        assert_eq!(metric_transfer_error(&id, &matches), Ok(0.0));

        // All residuals equal to (1, 0): the mean norm is exactly 1.
        let shifted: Vec<_> = matches
            .iter()
            .map(|(a, b)| (*a, b + Vector2::new(1.0, 0.0)))
            .collect();
        assert_eq!(metric_transfer_error(&id, &shifted), Ok(1.0));

        assert_eq!(metric_transfer_error(&id, &[]), Err(MetricsError::EmptySet));
    }

    #[test]
    fn transfer_error_matches_hand_summed_oracle() {
        let h = Matrix3::new(1.02, 0.01, -4.0, -0.02, 0.99, 3.0, 1e-5, -2e-5, 1.0);
        let matches: Vec<(Vector2<f64>, Vector2<f64>)> = (0..17)
            .map(|i| {
                let a = Vector2::new(100.0 + 31.0 * i as f64, 200.0 + 17.0 * i as f64);
                (a, a + Vector2::new(0.3 * i as f64, -0.2))
            })
            .collect();
        let mut sum = 0.0;
        for (a, b) in &matches {
            let q = h * Vector3::new(a.x, a.y, 1.0);
            let r = Vector2::new(b.x - q.x / q.z, b.y - q.y / q.z);
            sum += r.norm();
        }
        let oracle = sum / matches.len() as f64;
        assert_relative_eq!(
            metric_transfer_error(&h, &matches).unwrap(),
            oracle,
            epsilon = 1e-12
        );
    }

    fn two_camera_rig() -> (RigidTransform, RigidTransform, CameraIntrinsics, CameraIntrinsics) {
        let front = RigidTransform::new(
            rotation_from_euler_zyx(0.02, -1.5, 0.01),
            Vector3::new(1.5, 0.0, 1.6),
        );
        let second = RigidTransform::new(
            rotation_from_euler_zyx(-1.4, 0.3, 1.2),
            Vector3::new(0.8, 0.9, 1.5),
        );
        let intr_f = CameraIntrinsics::new(400.0, 400.0, 406.0, 270.0, 812, 540);
        let intr_q = CameraIntrinsics::new(300.0, 300.0, 406.0, 270.0, 812, 540);
        (front, second, intr_f, intr_q)
    }

    #[test]
    fn residual_error_zero_under_true_extrinsics() {
        let (front, second, intr_f, intr_q) = two_camera_rig();
        // Shared 3D points in the ground frame, projected into each camera
        // through its true extrinsic.
        let mut matches = Vec::new();
        for (i, g) in [
            Vector3::new(5.0, 1.0, 0.0),
            Vector3::new(7.0, -2.0, 0.0),
            Vector3::new(4.0, 2.5, 0.4),
            Vector3::new(9.0, 0.5, 0.0),
        ]
        .iter()
        .enumerate()
        {
            let in_f = front.inverse().transform_point(g);
            let in_q = second.inverse().transform_point(g);
            let (Ok(pf), Ok(pq)) = (project(&in_f, &intr_f), project(&in_q, &intr_q)) else {
                continue;
            };
            matches.push(CrossMatch {
                front: PixelPoint::new(pf.x, pf.y, i as u64),
                second: PixelPoint::new(pq.x, pq.y, i as u64),
            });
        }
        assert!(matches.len() >= 3);
        let err = metric_residual_error(&matches, &front, &second, &intr_f, &intr_q).unwrap();
        assert!(err < 1e-12, "residual {err}");

        // Perturbing the front camera yaw strictly increases the error.
        let yawed = RigidTransform::new(
            front.rotation * rotation_from_euler_zyx(0.0, 0.0, 0.5f64.to_radians()),
            front.translation,
        );
        let err_yaw = metric_residual_error(&matches, &yawed, &second, &intr_f, &intr_q).unwrap();
        assert!(err_yaw > err + 1e-6);
    }

    #[test]
    fn residual_error_single_match_equals_hand_computation() {
        let (front, second, intr_f, intr_q) = two_camera_rig();
        let g = Vector3::new(6.0, 1.5, 0.0);
        let pf = project(&front.inverse().transform_point(&g), &intr_f).unwrap();
        let pq = project(&second.inverse().transform_point(&g), &intr_q).unwrap();
        // Offset the second observation by 2 px along v to get a non-zero
        // residual we can hand-compute.
        let observed_q = Vector2::new(pq.x, pq.y + 2.0);
        let matches = [CrossMatch {
            front: PixelPoint::new(pf.x, pf.y, 0),
            second: PixelPoint::new(observed_q.x, observed_q.y, 0),
        }];
        let f_q = cross_camera_fundamental(&front, &second, &intr_f, &intr_q);
        let l_q = f_q * Vector3::new(pf.x, pf.y, 1.0);
        let l_f = f_q.transpose() * Vector3::new(observed_q.x, observed_q.y, 1.0);
        let d_q = (l_q.x * observed_q.x + l_q.y * observed_q.y + l_q.z).abs()
            / (l_q.x * l_q.x + l_q.y * l_q.y).sqrt();
        let d_f = (l_f.x * pf.x + l_f.y * pf.y + l_f.z).abs()
            / (l_f.x * l_f.x + l_f.y * l_f.y).sqrt();
        let expected = d_q * d_q + d_f * d_f;
        assert_relative_eq!(
            metric_residual_error(&matches, &front, &second, &intr_f, &intr_q).unwrap(),
            expected,
            epsilon = 1e-12
        );
        assert!(expected > 0.1);
    }

    #[test]
    fn compare_to_truth_trivial_and_bias_cases() {
        let scenario = generate(&ScenarioConfig {
            duration: 1.0,
            ..ScenarioConfig::default()
        })
        .unwrap();
        let truth = scenario.truth.nominal_ground_from_cam;
        let truth_euler = euler_zyx(&truth.rotation);
        let event = |xi: [f64; 6]| ReportEvent {
            timestamp: 0.5,
            keyframe_index: 3,
            segment: 0,
            xi,
            z: [0.0; 6],
            critical: 1.96,
            sample_count: 5,
        };

        let exact = event([
            truth_euler.x,
            truth_euler.y,
            truth_euler.z,
            truth.translation.x,
            truth.translation.y,
            truth.translation.z,
        ]);
        let d = compare_to_truth(&[exact.clone()], &scenario).unwrap();
        assert_eq!(
            (d.roll_deg, d.pitch_deg, d.yaw_deg, d.height_cm),
            (0.0, 0.0, 0.0, 0.0)
        );

        // Constant +0.2 degree roll bias shows up only in the roll column.
        let mut biased = exact;
        biased.xi[0] += 0.2f64.to_radians();
        let d = compare_to_truth(&[biased], &scenario).unwrap();
        assert_relative_eq!(d.roll_deg, 0.2, epsilon = 1e-9);
        assert_relative_eq!(d.pitch_deg, 0.0, epsilon = 1e-12);
        assert_relative_eq!(d.yaw_deg, 0.0, epsilon = 1e-12);
        assert_relative_eq!(d.height_cm, 0.0, epsilon = 1e-12);

        assert!(compare_to_truth(&[], &scenario).is_none());
    }
}
