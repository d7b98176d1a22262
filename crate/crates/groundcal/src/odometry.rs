//! Wheel-odometry dead reckoning with a kinematic bicycle model.
//!
//! Wheel speed and front-steering samples arrive from the CAN bus at a
//! higher rate than camera frames. Integration runs in a world frame that
//! coincides with the vehicle center-of-gravity (CoG) frame at the first
//! sample: `x` forward, `y` left, `z` up. Per sample interval:
//!
//! ```text
//! beta  = atan(L_r * tan(delta) / L)          // slip angle at the CoG
//! omega = [0, 0, v * sin(beta) / L_r]         // planar yaw rate
//! R'    = R * Exp(omega * dt)
//! P'    = P + v_w * dt + 0.5 * a_w * dt^2     // trapezoidal position update
//! ```
//!
//! where `v_w` is the world-frame velocity at the interval start and `a_w`
//! the world-frame velocity difference across the interval. Acceleration is
//! not observable from a single sample, so the stream integrator forward-
//! differences consecutive speeds (zero at the stream end).
//!
//! Relative motion between two integrated states, and its conjugation into
//! the camera frame through the vehicle-to-camera extrinsic, feed the
//! feature predictor and the epipolar quality check downstream.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::{exp_so3, RigidTransform};
use crate::sim::serde_ts;

/// One CAN-bus reading: vehicle speed plus front-wheel steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelSample {
    /// Sample time, seconds. Strictly increasing within a stream.
    #[serde(with = "serde_ts")]
    pub timestamp: f64,
    /// Longitudinal speed at the CoG, m/s.
    pub speed: f64,
    /// Front-wheel steering angle, radians, |angle| < pi/2.
    pub steering_angle: f64,
}

/// Bicycle geometry of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Front-to-rear axle distance L, meters.
    pub wheelbase: f64,
    /// CoG-to-rear-axle distance L_r, meters. 0 < L_r < L.
    pub cog_to_rear: f64,
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.cog_to_rear > 0.0 && self.cog_to_rear < self.wheelbase) {
            return Err(format!(
                "vehicle params need 0 < L_r < L, got L_r={} L={}",
                self.cog_to_rear, self.wheelbase
            ));
        }
        Ok(())
    }

    /// Slip angle beta for a steering angle.
    pub fn slip_angle(&self, steering: f64) -> f64 {
        (self.cog_to_rear * steering.tan() / self.wheelbase).atan()
    }

    /// Planar yaw rate for (speed, steering).
    pub fn yaw_rate(&self, speed: f64, steering: f64) -> f64 {
        speed * self.slip_angle(steering).sin() / self.cog_to_rear
    }
}

/// Integrated vehicle state in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    #[serde(with = "serde_ts")]
    pub timestamp: f64,
    /// CoG position, meters. The z component stays exactly 0.
    pub position: Vector3<f64>,
    /// CoG velocity, m/s. The z component stays exactly 0.
    pub velocity: Vector3<f64>,
    /// World-from-CoG heading rotation (pure yaw).
    pub heading_rotation: Matrix3<f64>,
    /// Accumulated heading angle, radians.
    pub heading_angle: f64,
}

impl VehicleState {
    /// Rest state at the origin.
    pub fn initial(timestamp: f64) -> Self {
        Self {
            timestamp,
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            heading_rotation: Matrix3::identity(),
            heading_angle: 0.0,
        }
    }

    /// World-from-CoG pose.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.heading_rotation, self.position)
    }
}

/// Which frame a relative motion lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionFrame {
    VehicleCog,
    Camera,
}

/// Relative motion between two instants of one rigid body.
///
/// `rotation` is the frame-change rotation taking free vectors from the
/// earlier frame into the later frame. `translation` is the displacement of
/// the body origin over the interval, expressed in the earlier frame (so a
/// 3 m straight drive gives `(3, 0, 0)` in the CoG frame). A static point
/// with coordinates `p` in the earlier frame has coordinates
/// `rotation * (p - translation)` in the later one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeMotion {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub frame: MotionFrame,
}

impl RelativeMotion {
    pub fn identity(frame: MotionFrame) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            frame,
        }
    }

    /// Coordinates in the later frame of a static point given in the earlier frame.
    pub fn transport_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.translation)
    }

    /// Translation column of the earlier-to-later homogeneous transform.
    pub fn transport_translation(&self) -> Vector3<f64> {
        -(self.rotation * self.translation)
    }

    /// The earlier-to-later frame change as a rigid transform.
    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.transport_translation())
    }

    /// Builds a relative motion from an earlier-to-later frame change.
    pub fn from_transform(t: &RigidTransform, frame: MotionFrame) -> Self {
        Self {
            rotation: t.rotation,
            translation: -(t.rotation.transpose() * t.translation),
            frame,
        }
    }

    /// The motion seen from the other end of the interval.
    pub fn inverse(&self) -> Self {
        Self {
            rotation: self.rotation.transpose(),
            translation: -(self.rotation * self.translation),
            frame: self.frame,
        }
    }
}

/// Advances the state by one interval using the sample at the interval start.
///
/// `accel` is the longitudinal acceleration over the interval, in m/s^2; pass
/// the forward speed difference of the enclosing stream or 0 when unknown.
/// Standstill (`speed == 0`) leaves pose and heading untouched.
pub fn integrate_step(
    state: &VehicleState,
    sample: &WheelSample,
    accel: f64,
    params: &VehicleParams,
    dt: f64,
) -> VehicleState {
    debug_assert!(dt > 0.0, "integration step must be positive");
    let beta = params.slip_angle(sample.steering_angle);
    let yaw_rate = sample.speed * beta.sin() / params.cog_to_rear;
    let heading_angle = state.heading_angle + yaw_rate * dt;
    let heading_rotation = state.heading_rotation * exp_so3(&Vector3::new(0.0, 0.0, yaw_rate * dt));

    let dir_start = state.heading_angle + beta;
    let dir_end = heading_angle + beta;
    let v_start = Vector3::new(
        sample.speed * dir_start.cos(),
        sample.speed * dir_start.sin(),
        0.0,
    );
    let speed_end = sample.speed + accel * dt;
    let v_end = Vector3::new(speed_end * dir_end.cos(), speed_end * dir_end.sin(), 0.0);

    // P' = P + v*dt + 0.5*(v_end - v_start)*dt = P + 0.5*(v_start + v_end)*dt.
    let position = state.position + (v_start + v_end) * (0.5 * dt);

    VehicleState {
        timestamp: sample.timestamp + dt,
        position,
        velocity: v_end,
        heading_rotation,
        heading_angle,
    }
}

/// Integrates a full sample stream starting from rest at the origin.
///
/// Returns one state per sample (the first is the initial state). The fold
/// order is fixed, so identical inputs give bitwise-identical outputs.
pub fn integrate_stream(samples: &[WheelSample], params: &VehicleParams) -> Vec<VehicleState> {
    let mut out = Vec::with_capacity(samples.len());
    if samples.is_empty() {
        return out;
    }
    let mut state = VehicleState::initial(samples[0].timestamp);
    state.velocity = Vector3::new(
        samples[0].speed * params.slip_angle(samples[0].steering_angle).cos(),
        samples[0].speed * params.slip_angle(samples[0].steering_angle).sin(),
        0.0,
    );
    out.push(state);
    for i in 0..samples.len() - 1 {
        let dt = samples[i + 1].timestamp - samples[i].timestamp;
        debug_assert!(dt > 0.0, "wheel sample timestamps must strictly increase");
        let accel = (samples[i + 1].speed - samples[i].speed) / dt;
        state = integrate_step(&state, &samples[i], accel, params, dt);
        out.push(state);
    }
    out
}

/// Integrated odometry with interpolated pose queries at arbitrary times.
///
/// Wheel samples are denser than camera frames; a frame timestamp that falls
/// between samples is served by a partial integration step from the previous
/// sample, which linearly interpolates speed across the interval.
#[derive(Debug, Clone)]
pub struct OdometryTracker {
    samples: Vec<WheelSample>,
    states: Vec<VehicleState>,
    params: VehicleParams,
}

impl OdometryTracker {
    pub fn new(samples: Vec<WheelSample>, params: VehicleParams) -> Self {
        let states = integrate_stream(&samples, &params);
        Self {
            samples,
            states,
            params,
        }
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    /// Integrated states, one per sample.
    pub fn states(&self) -> &[VehicleState] {
        &self.states
    }

    pub fn time_range(&self) -> Option<(f64, f64)> {
        Some((
            self.samples.first()?.timestamp,
            self.samples.last()?.timestamp,
        ))
    }

    /// Sample active at time `t` (zero-order hold).
    pub fn sample_at(&self, t: f64) -> Option<&WheelSample> {
        if self.samples.is_empty() || t < self.samples[0].timestamp {
            return None;
        }
        let idx = self
            .samples
            .partition_point(|s| s.timestamp <= t)
            .saturating_sub(1);
        self.samples.get(idx)
    }

    /// Vehicle state at time `t`, which must lie inside the sample range.
    pub fn state_at(&self, t: f64) -> Option<VehicleState> {
        let (t0, t1) = self.time_range()?;
        if t < t0 - 1e-9 || t > t1 + 1e-9 {
            return None;
        }
        let t = t.clamp(t0, t1);
        let idx = self
            .samples
            .partition_point(|s| s.timestamp <= t)
            .saturating_sub(1);
        let base = &self.states[idx];
        let dt = t - self.samples[idx].timestamp;
        if dt <= 0.0 {
            return Some(*base);
        }
        let accel = if idx + 1 < self.samples.len() {
            let span = self.samples[idx + 1].timestamp - self.samples[idx].timestamp;
            (self.samples[idx + 1].speed - self.samples[idx].speed) / span
        } else {
            0.0
        };
        Some(integrate_step(base, &self.samples[idx], accel, &self.params, dt))
    }
}

/// Relative motion of the vehicle between two integrated states.
///
/// Rotation is `R_{k+1}^T * R_k`; translation is the CoG displacement
/// expressed in the CoG frame at time k.
pub fn relative_vehicle_motion(earlier: &VehicleState, later: &VehicleState) -> RelativeMotion {
    RelativeMotion {
        rotation: later.heading_rotation.transpose() * earlier.heading_rotation,
        translation: earlier.heading_rotation.transpose() * (later.position - earlier.position),
        frame: MotionFrame::VehicleCog,
    }
}

/// Conjugates a CoG-frame relative motion into the camera frame through the
/// vehicle-to-camera extrinsic (`extrinsic` maps CoG coordinates to camera
/// coordinates). Transporting a static point through either frame chain gives
/// the same result.
pub fn vehicle_to_camera_motion(
    motion: &RelativeMotion,
    extrinsic: &RigidTransform,
) -> RelativeMotion {
    debug_assert_eq!(motion.frame, MotionFrame::VehicleCog);
    let conjugated = extrinsic
        .compose(&motion.to_transform())
        .compose(&extrinsic.inverse());
    RelativeMotion::from_transform(&conjugated, MotionFrame::Camera)
}
