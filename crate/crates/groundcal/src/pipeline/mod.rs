//! End-to-end calibration driver.
//!
//! Consumes a scenario stream and maintains the estimator state machine per
//! selected keyframe: odometry integration, prediction-assisted matching,
//! horizon gating, grid thinning, the epipolar quality check, ground
//! verification, plane fitting and filtering, the sliding-window solve with
//! marginalization, rotation/translation averaging, and the Z-test
//! reporting gate. Failure detection can reinitialize everything into a new
//! segment at any keyframe.

pub mod metrics;
pub mod report;

use std::collections::HashMap;
use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{fit_plane, CameraIntrinsics, GroundPlaneEstimate, PixelPoint, RigidTransform};
use crate::ground::epipolar::RansacParams;
use crate::ground::{
    epipolar_pose_check, grid_select, horizon_line, is_below_horizon, predict_feature,
    verify_ground_set, FeatureMatch, GroundError, Thresholds,
};
use crate::odometry::{relative_vehicle_motion, vehicle_to_camera_motion, OdometryTracker, VehicleState};
use crate::optimizer::{
    average_rotations, average_translations, build_rotation, detect_failure, homography,
    marginalize, optimize_window, z_test, CalibrationResult, FailureReason, FailureThresholds,
    MarginalPrior, OptimizerConfig, PairObservations, StepDiagnostics, WindowState, Xi,
};
use crate::sim::Scenario;

pub use metrics::{compare_to_truth, metric_residual_error, metric_transfer_error, MetricsError};
pub use report::{
    CalibrationReport, DeltaStats, FailureEvent, Histogram, KeyframeRecord, ReportEvent, Summary,
    REPORT_SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("scenario unusable: {0}")]
    BadScenario(String),
}

/// Keyframe selection gates: steady-speed driving with enough baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeConfig {
    /// Min odometry translation since the previous keyframe, meters.
    pub min_translation: f64,
    /// Speed window, m/s.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Max yaw rate, radians/second.
    pub max_yaw_rate: f64,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            min_translation: 0.5,
            min_speed: 1.0,
            max_speed: 40.0,
            max_yaw_rate: 5.0f64.to_radians(),
        }
    }
}

/// Prediction-assisted matcher settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    /// Acceptance radius around the predicted feature position, pixels.
    pub gate_radius_px: f64,
    pub grid_cols: u32,
    pub grid_rows: u32,
    pub per_cell: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            gate_radius_px: 15.0,
            grid_cols: 8,
            grid_rows: 6,
            per_cell: 3,
        }
    }
}

/// Pipeline configuration; serializable so runs are reproducible from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub thresholds: Thresholds,
    pub optimizer: OptimizerConfig,
    pub keyframe: KeyframeConfig,
    pub matcher: MatcherConfig,
    pub ransac: RansacParams,
    pub failure: FailureThresholds,
    /// Initial camera-to-ground guess; when absent the scenario's factory
    /// (nominal) transform is used.
    pub initial_ground_from_cam: Option<RigidTransform>,
    /// Z-test sample window N_h.
    pub z_test_window: usize,
    /// Fixed Z-test target; when absent the gate tracks the previous batch
    /// mean, so reporting means "the estimate is stationary".
    pub xi_target: Option<[f64; 6]>,
    /// Reprojection bound for verified ground features, pixels.
    pub triangulation_max_reproj_px: f64,
    /// Only triangulated points this close feed the raw plane fit, meters.
    pub plane_fit_max_depth_m: f64,
    /// Relative sigma of the odometry scale anchor.
    pub scale_sigma_rel: f64,
    /// Absolute floor of the odometry scale anchor sigma, meters.
    pub scale_sigma_min: f64,
    /// Consecutive unusable pairs tolerated before a feature-loss failure.
    pub max_consecutive_bad_pairs: usize,
    /// Base seed for the RANSAC and verification generators.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            optimizer: OptimizerConfig::default(),
            keyframe: KeyframeConfig::default(),
            matcher: MatcherConfig::default(),
            ransac: RansacParams::default(),
            failure: FailureThresholds::default(),
            initial_ground_from_cam: None,
            z_test_window: 5,
            xi_target: None,
            triangulation_max_reproj_px: 1.0,
            plane_fit_max_depth_m: 12.0,
            scale_sigma_rel: 0.01,
            scale_sigma_min: 0.005,
            max_consecutive_bad_pairs: 5,
            seed: 0x5eed,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.thresholds
            .validate()
            .map_err(PipelineError::InvalidConfig)?;
        self.optimizer
            .validate()
            .map_err(PipelineError::InvalidConfig)?;
        if self.z_test_window < 2 {
            return Err(PipelineError::InvalidConfig(
                "z_test_window must be at least 2".into(),
            ));
        }
        if !(self.keyframe.min_translation > 0.0) {
            return Err(PipelineError::InvalidConfig(
                "keyframe.min_translation must be positive".into(),
            ));
        }
        if self.matcher.grid_cols == 0 || self.matcher.grid_rows == 0 || self.matcher.per_cell == 0
        {
            return Err(PipelineError::InvalidConfig(
                "matcher grid must be non-trivial".into(),
            ));
        }
        if let Some(init) = &self.initial_ground_from_cam {
            if init.translation.z <= 0.0 {
                return Err(PipelineError::InvalidConfig(
                    "initial extrinsic must place the camera above the ground".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Current camera-to-ground belief.
#[derive(Debug, Clone, Copy)]
struct Estimate {
    ground_from_cam: RigidTransform,
}

impl Estimate {
    fn normal(&self) -> Vector3<f64> {
        self.ground_from_cam.rotation.row(2).transpose()
    }

    fn height(&self) -> f64 {
        self.ground_from_cam.translation.z
    }

    fn plane(&self) -> GroundPlaneEstimate {
        GroundPlaneEstimate {
            normal: self.normal(),
            height: self.height(),
            inlier_count: 0,
        }
    }

    fn xi(&self) -> [f64; 6] {
        CalibrationResult::new(
            self.ground_from_cam.rotation,
            self.ground_from_cam.translation,
            0,
            false,
        )
        .xi
    }
}

struct WindowSlot {
    obs: PairObservations,
    motion: crate::odometry::RelativeMotion,
}

/// Deterministic per-pair stream seed.
fn derive_seed(base: u64, index: usize, salt: u64) -> u64 {
    let mut x = base ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ salt;
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x
}

/// Runs the full calibration pipeline over a scenario.
pub fn run_pipeline(
    scenario: &Scenario,
    config: &PipelineConfig,
) -> Result<CalibrationReport, PipelineError> {
    config.validate()?;
    scenario
        .vehicle
        .validate()
        .map_err(PipelineError::BadScenario)?;
    if scenario.wheel_samples.len() < 2 {
        return Err(PipelineError::BadScenario(
            "scenario has no odometry stream".into(),
        ));
    }

    let intr = scenario.intrinsics;
    let tracker = OdometryTracker::new(scenario.wheel_samples.clone(), scenario.vehicle);
    let initial = Estimate {
        ground_from_cam: config
            .initial_ground_from_cam
            .unwrap_or(scenario.truth.nominal_ground_from_cam),
    };

    let mut estimate = initial;
    let mut window: VecDeque<WindowSlot> = VecDeque::new();
    let mut prior: Option<MarginalPrior> = None;
    let mut rotation_samples: VecDeque<Matrix3<f64>> = VecDeque::new();
    let mut translation_samples: VecDeque<Vector3<f64>> = VecDeque::new();
    let mut xi_history: Vec<Xi> = Vec::new();
    let mut segment = 0usize;
    let mut consecutive_bad = 0usize;
    let mut last_kf: Option<(usize, VehicleState)> = None;

    let mut events = Vec::new();
    let mut keyframes = Vec::new();
    let mut failures = Vec::new();
    let mut transfer_hist = Histogram::new(0.05, 60);
    let mut residual_hist = scenario
        .second_intrinsics
        .map(|_| Histogram::new(0.05, 60));
    let mut solves = 0usize;
    let mut pair_count = 0usize;

    for (frame_idx, kf) in scenario.keyframes.iter().enumerate() {
        let t = kf.timestamp;
        let Some(state) = tracker.state_at(t) else {
            continue;
        };
        let Some(sample) = tracker.sample_at(t) else {
            continue;
        };

        // Keyframe gates: steady speed, bounded yaw rate, enough baseline.
        let speed_ok =
            sample.speed >= config.keyframe.min_speed && sample.speed <= config.keyframe.max_speed;
        let yaw_ok = scenario
            .vehicle
            .yaw_rate(sample.speed, sample.steering_angle)
            .abs()
            <= config.keyframe.max_yaw_rate;
        if !(speed_ok && yaw_ok) {
            continue;
        }
        let Some((prev_idx, prev_state)) = last_kf else {
            last_kf = Some((frame_idx, state));
            continue;
        };
        let baseline = (state.position - prev_state.position).norm();
        if baseline < config.keyframe.min_translation {
            continue;
        }

        pair_count += 1;
        let mut record = KeyframeRecord {
            keyframe_index: frame_idx,
            timestamp: t,
            segment,
            candidate_matches: 0,
            below_horizon: 0,
            grid_selected: 0,
            epipolar_inliers: None,
            pose_accepted: None,
            verified_ground: 0,
            plane_fit_points: 0,
            raw_plane: None,
            plane_quality_ok: None,
            window_fill: window.len(),
            window_solved: false,
            transfer_error_px: None,
            residual_error_px2: None,
            estimate_xi: estimate.xi(),
            failure: None,
        };

        // Odometry-derived camera motion for this pair.
        let vehicle_motion = relative_vehicle_motion(&prev_state, &state);
        let cam_odo = vehicle_to_camera_motion(&vehicle_motion, &scenario.cam_from_cog);

        // Matching with prediction gating, then horizon gating and thinning.
        let prev_frame = &scenario.keyframes[prev_idx];
        let current: HashMap<u64, (PixelPoint, f64)> = kf
            .observations
            .iter()
            .map(|o| (o.point.track_id, (o.point, o.quality)))
            .collect();
        let normal = estimate.normal();
        let height = estimate.height();
        let mut matches: Vec<FeatureMatch> = Vec::new();
        for obs in &prev_frame.observations {
            let Some((tracked, quality2)) = current.get(&obs.point.track_id) else {
                continue;
            };
            let Ok(predicted) = predict_feature(&obs.point, &cam_odo, &normal, height, &intr)
            else {
                continue;
            };
            if (predicted.coords() - tracked.coords()).norm() > config.matcher.gate_radius_px {
                continue;
            }
            matches.push(FeatureMatch::new(
                obs.point,
                *tracked,
                predicted,
                obs.quality.min(*quality2),
            ));
        }
        record.candidate_matches = matches.len();

        let horizon = horizon_line(&estimate.ground_from_cam.rotation.transpose(), &intr);
        let matches: Vec<FeatureMatch> = match &horizon {
            Ok(line) => matches
                .into_iter()
                .filter(|m| is_below_horizon(line, &m.p_k))
                .collect(),
            Err(_) => Vec::new(),
        };
        record.below_horizon = matches.len();

        let matches = grid_select(
            &matches,
            config.matcher.grid_cols,
            config.matcher.grid_rows,
            config.matcher.per_cell,
            &intr,
        );
        record.grid_selected = matches.len();

        // Epipolar quality check against odometry.
        let check = epipolar_pose_check(
            &matches,
            &cam_odo,
            &normal,
            &config.thresholds,
            &config.ransac,
            &intr,
            derive_seed(config.seed, frame_idx, 0xeb1b),
        );
        let mut verified = Vec::new();
        let mut raw_plane: Option<GroundPlaneEstimate> = None;
        let mut pose = None;
        match check {
            Ok(pc) => {
                record.epipolar_inliers = Some(pc.inliers.len());
                record.pose_accepted = Some(pc.accepted);
                if pc.accepted {
                    let inlier_matches: Vec<FeatureMatch> =
                        pc.inliers.iter().map(|&i| matches[i]).collect();
                    match verify_ground_set(
                        &inlier_matches,
                        &pc.pose,
                        &estimate.plane(),
                        &config.thresholds,
                        &intr,
                        config.triangulation_max_reproj_px,
                        derive_seed(config.seed, frame_idx, 0x6e0d),
                    ) {
                        Ok(v) => verified = v,
                        Err(GroundError::NoGroundSeed) | Err(GroundError::InsufficientMatches { .. }) => {}
                        Err(_) => {}
                    }
                    pose = Some(pc.pose);
                }
            }
            Err(_) => {}
        }
        record.verified_ground = verified.len();

        // Plane fit over near-field triangulated points.
        let quality_ok = if let Some(pose) = &pose {
            let fit_points: Vec<crate::geom::GroundPoint3D> = verified
                .iter()
                .map(|v| v.point)
                .filter(|p| p.position.z <= config.plane_fit_max_depth_m)
                .collect();
            record.plane_fit_points = fit_points.len();
            raw_plane = fit_plane(&fit_points).ok();
            record.raw_plane = raw_plane;
            raw_plane.map(|p| {
                crate::ground::filter_plane_estimate(
                    &p,
                    &pose.translation,
                    estimate.height(),
                    &config.thresholds,
                )
            })
        } else {
            None
        };
        record.plane_quality_ok = quality_ok;

        // Failure detection over this keyframe's diagnostics. Quality-gate
        // rejections only count once they persist; a single noisy plane fit
        // is dropped without restarting the estimator.
        let pair_usable = pose.is_some()
            && verified.len() >= config.failure.min_ground_features
            && quality_ok == Some(true);
        if pair_usable {
            consecutive_bad = 0;
        } else {
            consecutive_bad += 1;
        }
        let persistent_loss = consecutive_bad >= config.max_consecutive_bad_pairs;
        let diag = StepDiagnostics {
            rotation_step: pose
                .as_ref()
                .map_or(0.0, |p| crate::geom::log_so3(&p.rotation).norm()),
            translation_step: pose.as_ref().map_or(0.0, |p| p.translation.norm()),
            ground_feature_count: if persistent_loss { 0 } else { verified.len().max(config.failure.min_ground_features) },
            triangulated_count: if pose.is_some() {
                record.plane_fit_points.max(config.failure.min_triangulated)
            } else {
                config.failure.min_triangulated
            },
            plane: raw_plane,
            reference_plane: Some(estimate.plane()),
            plane_quality_ok: if persistent_loss { Some(false) } else { None },
        };
        // Immediate criteria run on the raw numbers; the counts above are
        // clamped so only a persistent loss trips the feature criteria.
        let immediate = StepDiagnostics {
            ground_feature_count: diag.ground_feature_count,
            triangulated_count: diag.triangulated_count,
            ..diag
        };
        let failure = detect_failure(&immediate, &config.failure);

        if let Some(reason) = failure {
            segment += 1;
            failures.push(FailureEvent {
                timestamp: t,
                keyframe_index: frame_idx,
                reason,
                new_segment: segment,
            });
            record.failure = Some(reason);
            window.clear();
            prior = None;
            rotation_samples.clear();
            translation_samples.clear();
            xi_history.clear();
            consecutive_bad = 0;
            // Reseed the belief. After a plane jump the fresh fit is the
            // best available evidence; otherwise fall back to the factory
            // belief.
            estimate = match (reason, raw_plane, &pose) {
                (FailureReason::PlaneJump, Some(p), Some(pose_m)) => {
                    match build_rotation(&p.normal, &pose_m.translation) {
                        Ok(rot) => Estimate {
                            ground_from_cam: RigidTransform::new(
                                rot,
                                Vector3::new(
                                    initial.ground_from_cam.translation.x,
                                    initial.ground_from_cam.translation.y,
                                    p.height,
                                ),
                            ),
                        },
                        Err(_) => initial,
                    }
                }
                _ => initial,
            };
            record.estimate_xi = estimate.xi();
            keyframes.push(record);
            last_kf = Some((frame_idx, state));
            continue;
        }

        // Accepted pair: push into the window.
        if pair_usable {
            let pose = pose.expect("usable pair has a pose");
            let anchor_len = cam_odo.translation.norm();
            let anchor_sigma = (config.scale_sigma_rel * anchor_len).max(config.scale_sigma_min);
            let pixel_matches: Vec<(nalgebra::Vector2<f64>, nalgebra::Vector2<f64>)> = verified
                .iter()
                .map(|v| (v.feature.p_k.coords(), v.feature.p_k1.coords()))
                .collect();
            window.push_back(WindowSlot {
                obs: PairObservations {
                    matches: pixel_matches,
                    scale_anchor: Some((anchor_len, anchor_sigma)),
                },
                motion: pose,
            });
            record.window_fill = window.len();
        }

        // Full window: solve, update the calibration, slide.
        if window.len() >= config.optimizer.window_size {
            let motions: Vec<crate::odometry::RelativeMotion> =
                window.iter().map(|s| s.motion).collect();
            let pairs: Vec<PairObservations> = window.iter().map(|s| s.obs.clone()).collect();
            let init_state = WindowState::new(motions, estimate.normal(), estimate.height());
            match optimize_window(&init_state, &pairs, prior.as_ref(), &config.optimizer, &intr) {
                Ok((solved, _stats)) => {
                    solves += 1;
                    record.window_solved = true;
                    for (slot, motion) in window.iter_mut().zip(solved.motions.iter()) {
                        slot.motion = *motion;
                    }

                    // Transfer error of the newest pair under the solved window.
                    let newest = window.back().expect("window non-empty");
                    let h_mat = homography(&newest.motion, &solved.plane(), &intr);
                    if let Ok(eps_f) = metric_transfer_error(&h_mat, &newest.obs.matches) {
                        transfer_hist.add(eps_f);
                        record.transfer_error_px = Some(eps_f);
                    }

                    // Calibration assembly and averaging.
                    if let Ok(rot) = build_rotation(
                        &solved.normal,
                        &solved.motions.last().expect("non-empty").translation,
                    ) {
                        let trans = Vector3::new(
                            initial.ground_from_cam.translation.x,
                            initial.ground_from_cam.translation.y,
                            solved.height,
                        );
                        rotation_samples.push_back(rot);
                        translation_samples.push_back(trans);
                        while rotation_samples.len() > config.optimizer.averaging_window {
                            rotation_samples.pop_front();
                            translation_samples.pop_front();
                        }
                        let rotations: Vec<Matrix3<f64>> =
                            rotation_samples.iter().copied().collect();
                        let translations: Vec<Vector3<f64>> =
                            translation_samples.iter().copied().collect();
                        if let Ok(avg_rot) = average_rotations(&rotations) {
                            let avg_t = average_translations(&translations);
                            estimate = Estimate {
                                ground_from_cam: RigidTransform::new(avg_rot, avg_t),
                            };
                            let result = CalibrationResult::new(avg_rot, avg_t, rotation_samples.len(), false);
                            xi_history.push(result.xi_vector());

                            // Z-test reporting gate.
                            let n_h = config.z_test_window;
                            let target: Option<Xi> = match config.xi_target {
                                Some(t) => Some(Xi::from_column_slice(&t)),
                                None if xi_history.len() >= 2 * n_h => {
                                    let prev = &xi_history[xi_history.len() - 2 * n_h
                                        ..xi_history.len() - n_h];
                                    Some(prev.iter().sum::<Xi>() / n_h as f64)
                                }
                                None => None,
                            };
                            if xi_history.len() >= n_h {
                                if let Some(target) = target {
                                    let samples = &xi_history[xi_history.len() - n_h..];
                                    let res = z_test(samples, &target, config.optimizer.alpha);
                                    if res.report {
                                        events.push(ReportEvent {
                                            timestamp: t,
                                            keyframe_index: frame_idx,
                                            segment,
                                            xi: result.xi,
                                            z: res.z,
                                            critical: res.critical,
                                            sample_count: n_h,
                                        });
                                    }
                                }
                            }
                        }
                    }

                    // Slide: marginalize the oldest pair.
                    let solved_state = solved;
                    let oldest = window.pop_front().expect("window non-empty");
                    match marginalize(
                        &solved_state,
                        &oldest.obs,
                        prior.as_ref(),
                        &config.optimizer,
                        &intr,
                    ) {
                        Ok(p) => prior = Some(p),
                        Err(_) => prior = None,
                    }
                }
                Err(_) => {
                    // A diverged solve is treated like a lost window.
                    window.clear();
                    prior = None;
                }
            }
        }

        // Cross-camera residual metric under the current estimate.
        if let (Some(second_intr), Some(second_gfc)) = (
            scenario.second_intrinsics.as_ref(),
            scenario.truth.second_ground_from_cam.as_ref(),
        ) {
            if !kf.cross_matches.is_empty() {
                if let Ok(eps_p) = metric_residual_error(
                    &kf.cross_matches,
                    &estimate.ground_from_cam,
                    second_gfc,
                    &intr,
                    second_intr,
                ) {
                    record.residual_error_px2 = Some(eps_p);
                    if let Some(hist) = residual_hist.as_mut() {
                        hist.add(eps_p);
                    }
                }
            }
        }

        record.estimate_xi = estimate.xi();
        keyframes.push(record);
        last_kf = Some((frame_idx, state));
    }

    let mut report = CalibrationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        events,
        keyframes,
        failures,
        summary: Summary {
            keyframe_count: 0,
            pair_count,
            window_solves: solves,
            report_count: 0,
            failure_count: 0,
            segments: segment + 1,
            transfer_error: transfer_hist,
            residual_error: residual_hist,
            deltas: None,
            final_xi: None,
        },
    };
    report.summary.keyframe_count = report.keyframes.len();
    report.summary.report_count = report.events.len();
    report.summary.failure_count = report.failures.len();
    report.summary.final_xi = report.events.last().map(|e| e.xi);
    report.summary.deltas = compare_to_truth(&report.events, scenario);
    Ok(report)
}
