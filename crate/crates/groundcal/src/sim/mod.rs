//! Deterministic synthetic driving scenarios with full ground truth.
//!
//! A scenario bundles everything the calibration pipeline consumes — wheel
//! odometry, per-frame feature tracks, camera intrinsics, the factory
//! vehicle-to-camera extrinsic — together with the truth needed to score it:
//! true vehicle poses, the true (possibly time-varying) camera-to-ground
//! transform and a ground/structure label per feature track.
//!
//! Landmarks are sampled along the driven corridor: ground landmarks on the
//! road plane, structure landmarks on vertical bands beside it. Observations
//! are pinhole projections through the scheduled true extrinsic plus i.i.d.
//! Gaussian pixel noise; wheel samples are the exact trajectory plus i.i.d.
//! Gaussian speed/steering noise. Everything is drawn from a single seeded
//! generator in a fixed order, so a given config reproduces bitwise.

pub mod io;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    project, rotation_from_euler_zyx, CameraIntrinsics, PixelPoint, RigidTransform,
};
use crate::odometry::{OdometryTracker, VehicleParams, VehicleState, WheelSample};

/// Serializes timestamps as decimal strings so the on-disk format is
/// unambiguous; Rust's shortest-roundtrip formatting keeps the round trip
/// bit-exact.
pub mod serde_ts {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:?}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse::<f64>()
            .map_err(|e| serde::de::Error::custom(format!("bad timestamp {raw:?}: {e}")))
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("no landmark visible in two consecutive keyframes")]
    EmptyScene,
    #[error("scenario io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported scenario schema version {0} (expected {expected})", expected = io::SCHEMA_VERSION)]
    SchemaVersionMismatch(u32),
    #[error("malformed scenario field at line {line}, column {column}: {message}")]
    MalformedField {
        line: usize,
        column: usize,
        message: String,
    },
}

/// Speed/steering measurement noise, standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryNoise {
    /// m/s
    pub speed_sigma: f64,
    /// radians
    pub steering_sigma: f64,
}

impl OdometryNoise {
    pub fn none() -> Self {
        Self {
            speed_sigma: 0.0,
            steering_sigma: 0.0,
        }
    }
}

/// Commanded speed/steering profile of the drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Constant speed, zero steering.
    Straight { speed: f64 },
    /// Constant speed and steering angle.
    Arc { speed: f64, steering_angle: f64 },
    /// Constant speed, sinusoidal steering.
    SCurve {
        speed: f64,
        steering_amplitude: f64,
        period: f64,
    },
    /// Trapezoidal speed profile alternating cruise and standstill.
    StopAndGo { cruise_speed: f64, period: f64 },
}

impl TrajectoryKind {
    /// Commanded `(speed, steering)` at time `t`.
    pub fn profile(&self, t: f64) -> (f64, f64) {
        match *self {
            TrajectoryKind::Straight { speed } => (speed, 0.0),
            TrajectoryKind::Arc {
                speed,
                steering_angle,
            } => (speed, steering_angle),
            TrajectoryKind::SCurve {
                speed,
                steering_amplitude,
                period,
            } => (
                speed,
                steering_amplitude * (2.0 * std::f64::consts::PI * t / period).sin(),
            ),
            TrajectoryKind::StopAndGo {
                cruise_speed,
                period,
            } => {
                // Piecewise per period: ramp up, cruise, ramp down, stop.
                let phase = (t / period).fract();
                let v = if phase < 0.15 {
                    cruise_speed * (phase / 0.15)
                } else if phase < 0.55 {
                    cruise_speed
                } else if phase < 0.7 {
                    cruise_speed * (1.0 - (phase - 0.55) / 0.15)
                } else {
                    0.0
                };
                (v, 0.0)
            }
        }
    }
}

/// A timed change of the true camera-to-ground transform (tire pressure,
/// load shifts, ...). Applied as a camera-side rotation delta plus a height
/// offset, ramped linearly over `ramp_duration` (0 = step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicPerturbation {
    pub start_time: f64,
    pub ramp_duration: f64,
    /// Roll, pitch, yaw delta in radians, applied in the camera frame.
    pub rotation_delta_rpy: [f64; 3],
    /// Camera height change, meters.
    pub height_delta: f64,
}

/// Which way a camera mount faces before fine adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraFacing {
    Forward,
    Left,
}

/// Camera mount: intrinsics plus pose of the camera in the CoG frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraMount {
    pub intrinsics: CameraIntrinsics,
    /// Camera center in CoG coordinates, meters (x forward, y left, z up).
    pub position: Vector3<f64>,
    /// Fine mount rotation in the camera frame; positive roll (first
    /// component) pitches the view down toward the road.
    pub rotation_rpy: [f64; 3],
    pub facing: CameraFacing,
}

impl CameraMount {
    /// The CoG-to-camera frame change (maps CoG coordinates to camera coordinates).
    pub fn cam_from_cog(&self) -> RigidTransform {
        let base = match self.facing {
            // Columns are the CoG axes expressed in camera coordinates.
            CameraFacing::Forward => {
                nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
            }
            CameraFacing::Left => {
                nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
            }
        };
        let fine = rotation_from_euler_zyx(
            self.rotation_rpy[0],
            self.rotation_rpy[1],
            self.rotation_rpy[2],
        );
        let rotation = fine * base;
        let translation = -(rotation * self.position);
        RigidTransform::new(rotation, translation)
    }
}

/// Full scenario description; `generate` is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// seconds
    pub duration: f64,
    /// Hz; must be >= frame_rate.
    pub wheel_rate: f64,
    /// Hz
    pub frame_rate: f64,
    pub trajectory: TrajectoryKind,
    /// Ground landmarks per square meter of corridor.
    pub ground_feature_density: f64,
    /// Fraction of landmarks placed on structures instead of the road.
    pub structure_fraction: f64,
    /// Pixel noise standard deviation.
    pub pixel_noise_sigma: f64,
    pub odometry_noise: OdometryNoise,
    /// Sorted by start time.
    pub extrinsic_schedule: Vec<ExtrinsicPerturbation>,
    pub vehicle: VehicleParams,
    /// CoG height above the road, meters.
    pub cog_height: f64,
    pub camera: CameraMount,
    pub second_camera: Option<CameraMount>,
    /// Half width of the ground-feature corridor, meters.
    pub corridor_half_width: f64,
    /// Structure landmark heights above the road, [min, max] meters.
    pub structure_height_range: [f64; 2],
    /// Landmark visibility range, meters.
    pub max_range: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration: 5.0,
            wheel_rate: 100.0,
            frame_rate: 33.0,
            trajectory: TrajectoryKind::Straight { speed: 10.0 },
            ground_feature_density: 0.5,
            structure_fraction: 0.25,
            pixel_noise_sigma: 0.0,
            odometry_noise: OdometryNoise::none(),
            extrinsic_schedule: Vec::new(),
            vehicle: VehicleParams {
                wheelbase: 2.8,
                cog_to_rear: 1.4,
            },
            cog_height: 0.55,
            camera: CameraMount {
                intrinsics: CameraIntrinsics::new(400.0, 400.0, 406.0, 270.0, 812, 540),
                position: Vector3::new(1.5, 0.0, 1.05),
                rotation_rpy: [0.12, 0.0, 0.0],
                facing: CameraFacing::Forward,
            },
            second_camera: None,
            corridor_half_width: 12.0,
            structure_height_range: [0.3, 4.0],
            max_range: 30.0,
        }
    }
}

impl ScenarioConfig {
    /// A left-facing wide-angle mount with forward overlap, for the
    /// cross-camera residual metric.
    pub fn default_second_camera() -> CameraMount {
        CameraMount {
            intrinsics: CameraIntrinsics::new(300.0, 300.0, 406.0, 270.0, 812, 540),
            position: Vector3::new(0.9, 0.9, 0.95),
            // Yaw the left-facing view 50 degrees toward the front so it
            // shares ground with the forward camera.
            rotation_rpy: [0.15, 0.0, -0.88],
            facing: CameraFacing::Left,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.duration > 0.0) {
            return fail("duration must be positive");
        }
        if !(self.wheel_rate >= self.frame_rate) {
            return fail("wheel_rate must be at least frame_rate");
        }
        if !(self.frame_rate > 0.0) {
            return fail("frame_rate must be positive");
        }
        if self.ground_feature_density < 0.0 {
            return fail("ground_feature_density must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.structure_fraction) {
            return fail("structure_fraction must lie in [0, 1]");
        }
        if self.pixel_noise_sigma < 0.0 || self.odometry_noise.speed_sigma < 0.0 {
            return fail("noise sigmas must be non-negative");
        }
        if !(self.cog_height > 0.0) {
            return fail("cog_height must be positive");
        }
        if !(self.structure_height_range[0] <= self.structure_height_range[1]) {
            return fail("structure_height_range must be ordered");
        }
        self.vehicle.validate().map_err(SimError::InvalidConfig)?;
        self.camera
            .intrinsics
            .validate()
            .map_err(SimError::InvalidConfig)?;
        if let Some(second) = &self.second_camera {
            second
                .intrinsics
                .validate()
                .map_err(SimError::InvalidConfig)?;
        }
        for w in self.extrinsic_schedule.windows(2) {
            if w[0].start_time > w[1].start_time {
                return fail("extrinsic_schedule must be sorted by start_time");
            }
        }
        Ok(())
    }
}

/// One feature measurement with its tracker quality score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub point: PixelPoint,
    pub quality: f64,
}

/// A feature seen by both cameras at the same instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossMatch {
    pub front: PixelPoint,
    pub second: PixelPoint,
}

/// All observations of one candidate keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeObservations {
    #[serde(with = "serde_ts")]
    pub timestamp: f64,
    pub observations: Vec<Observation>,
    #[serde(default)]
    pub cross_matches: Vec<CrossMatch>,
}

impl KeyframeObservations {
    pub fn find(&self, track_id: u64) -> Option<&Observation> {
        self.observations
            .iter()
            .find(|o| o.point.track_id == track_id)
    }
}

/// Ground/structure truth label of one track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackLabel {
    pub track_id: u64,
    pub on_ground: bool,
}

/// Everything needed to score a run against the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    /// Factory camera-to-ground transform before any scheduled perturbation.
    pub nominal_ground_from_cam: RigidTransform,
    /// The perturbation schedule that was applied.
    pub extrinsic_schedule: Vec<ExtrinsicPerturbation>,
    /// True camera-to-ground transform at each keyframe.
    pub frame_ground_from_cam: Vec<RigidTransform>,
    /// True vehicle state at each keyframe.
    pub vehicle_states: Vec<VehicleState>,
    /// Ground/structure label per track, sorted by id.
    pub track_labels: Vec<TrackLabel>,
    /// True camera-to-ground transform of the second camera (static).
    pub second_ground_from_cam: Option<RigidTransform>,
}

impl ScenarioTruth {
    pub fn is_ground_track(&self, track_id: u64) -> Option<bool> {
        self.track_labels
            .binary_search_by_key(&track_id, |l| l.track_id)
            .ok()
            .map(|i| self.track_labels[i].on_ground)
    }

    /// True camera-to-ground transform active at time `t`.
    pub fn ground_from_cam_at(&self, t: f64) -> RigidTransform {
        apply_extrinsic_schedule(&self.nominal_ground_from_cam, &self.extrinsic_schedule, t)
    }
}

/// A generated scenario: pipeline inputs plus scoring truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub intrinsics: CameraIntrinsics,
    pub second_intrinsics: Option<CameraIntrinsics>,
    pub vehicle: VehicleParams,
    /// Factory vehicle-to-camera extrinsic handed to the pipeline.
    pub cam_from_cog: RigidTransform,
    /// Measured (noisy) wheel samples.
    pub wheel_samples: Vec<WheelSample>,
    /// Candidate keyframes at the camera frame rate.
    pub keyframes: Vec<KeyframeObservations>,
    pub truth: ScenarioTruth,
}

impl Scenario {
    /// Fraction of samples where the vehicle is actually moving.
    pub fn driving_fraction(&self) -> f64 {
        if self.wheel_samples.is_empty() {
            return 0.0;
        }
        let moving = self
            .wheel_samples
            .iter()
            .filter(|s| s.speed > 0.1)
            .count();
        moving as f64 / self.wheel_samples.len() as f64
    }
}

/// Evaluates the extrinsic perturbation schedule at time `t`.
///
/// Each entry ramps linearly from its start over `ramp_duration` seconds
/// (instantaneous when 0) and entries accumulate in order: the rotation
/// delta right-multiplies in the camera frame, the height delta adds to the
/// third translation component.
pub fn apply_extrinsic_schedule(
    nominal: &RigidTransform,
    schedule: &[ExtrinsicPerturbation],
    t: f64,
) -> RigidTransform {
    let mut rotation = nominal.rotation;
    let mut translation = nominal.translation;
    for entry in schedule {
        if t < entry.start_time {
            break;
        }
        let s = if entry.ramp_duration <= 0.0 {
            1.0
        } else {
            ((t - entry.start_time) / entry.ramp_duration).clamp(0.0, 1.0)
        };
        let full = rotation_from_euler_zyx(
            entry.rotation_delta_rpy[0],
            entry.rotation_delta_rpy[1],
            entry.rotation_delta_rpy[2],
        );
        let scaled = crate::geom::exp_so3(&(crate::geom::log_so3(&full) * s));
        rotation *= scaled;
        translation.z += s * entry.height_delta;
    }
    RigidTransform::new(rotation, translation)
}

#[derive(Debug, Clone, Copy)]
struct Landmark {
    position: Vector3<f64>,
    on_ground: bool,
    quality: f64,
}

/// Piecewise-linear arclength lookup over integrated vehicle states.
struct PathIndex<'a> {
    states: &'a [VehicleState],
    cumulative: Vec<f64>,
}

impl<'a> PathIndex<'a> {
    fn new(states: &'a [VehicleState]) -> Self {
        let mut cumulative = Vec::with_capacity(states.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in states.windows(2) {
            acc += (w[1].position - w[0].position).norm();
            cumulative.push(acc);
        }
        Self { states, cumulative }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    /// Position and left direction at arclength `s`, extrapolating beyond the ends.
    fn sample(&self, s: f64) -> (Vector3<f64>, Vector3<f64>) {
        let heading_left = |state: &VehicleState| state.heading_rotation * Vector3::y();
        let forward = |state: &VehicleState| state.heading_rotation * Vector3::x();
        if s <= 0.0 {
            let st = &self.states[0];
            return (st.position + forward(st) * s, heading_left(st));
        }
        if s >= self.length() {
            let st = self.states.last().unwrap();
            return (
                st.position + forward(st) * (s - self.length()),
                heading_left(st),
            );
        }
        let idx = self
            .cumulative
            .partition_point(|&c| c <= s)
            .saturating_sub(1);
        let seg = (self.cumulative[idx + 1] - self.cumulative[idx]).max(1e-12);
        let alpha = (s - self.cumulative[idx]) / seg;
        let p = self.states[idx].position
            + (self.states[idx + 1].position - self.states[idx].position) * alpha;
        (p, heading_left(&self.states[idx]))
    }
}

/// Generates a scenario. Deterministic under a fixed config.
pub fn generate(config: &ScenarioConfig) -> Result<Scenario, SimError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    // True and measured wheel streams share timestamps.
    let n_samples = (config.duration * config.wheel_rate).floor() as usize;
    let mut true_samples = Vec::with_capacity(n_samples + 1);
    for i in 0..=n_samples {
        let t = i as f64 / config.wheel_rate;
        let (speed, steering) = config.trajectory.profile(t);
        true_samples.push(WheelSample {
            timestamp: t,
            speed,
            steering_angle: steering,
        });
    }
    let measured_samples: Vec<WheelSample> = true_samples
        .iter()
        .map(|s| {
            let dv: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal)
                * config.odometry_noise.speed_sigma;
            let dd: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal)
                * config.odometry_noise.steering_sigma;
            WheelSample {
                timestamp: s.timestamp,
                speed: (s.speed + dv).max(0.0),
                steering_angle: (s.steering_angle + dd)
                    .clamp(-std::f64::consts::FRAC_PI_2 + 0.01, std::f64::consts::FRAC_PI_2 - 0.01),
            }
        })
        .collect();

    let true_tracker = OdometryTracker::new(true_samples, config.vehicle);
    let true_states = integrated_states(&true_tracker);

    // Frame schedule.
    let (t0, t1) = true_tracker.time_range().unwrap();
    let mut frame_times = Vec::new();
    let mut i = 0usize;
    loop {
        let t = i as f64 / config.frame_rate;
        if t > t1 + 1e-9 {
            break;
        }
        frame_times.push(t.clamp(t0, t1));
        i += 1;
    }

    // Landmarks along the driven corridor.
    let path = PathIndex::new(true_states);
    let margin = config.max_range.max(10.0);
    let span = path.length() + 2.0 * margin;
    let area = span * 2.0 * config.corridor_half_width;
    let count = (config.ground_feature_density * area).round() as usize;
    let mut landmarks = Vec::with_capacity(count);
    for _ in 0..count {
        let s = rng.gen_range(-margin..path.length() + margin);
        let lat = rng.gen_range(-config.corridor_half_width..config.corridor_half_width);
        let on_structure = rng.gen_range(0.0..1.0) < config.structure_fraction;
        let quality = rng.gen_range(0.2..1.0);
        let (base, left) = path.sample(s);
        let position = if on_structure {
            // Push structure to vertical bands flanking the road and lift it.
            let side = if lat >= 0.0 { 1.0 } else { -1.0 };
            let wall_lat = side * (0.35 * config.corridor_half_width + 0.9 * lat.abs());
            let height =
                rng.gen_range(config.structure_height_range[0]..=config.structure_height_range[1]);
            Vector3::new(
                base.x + left.x * wall_lat,
                base.y + left.y * wall_lat,
                -config.cog_height + height,
            )
        } else {
            Vector3::new(base.x + left.x * lat, base.y + left.y * lat, -config.cog_height)
        };
        landmarks.push(Landmark {
            position,
            on_ground: !on_structure,
            quality,
        });
    }

    // Frame transforms.
    let ground_from_cog = RigidTransform::new(
        nalgebra::Matrix3::identity(),
        Vector3::new(0.0, 0.0, config.cog_height),
    );
    let cog_from_ground = ground_from_cog.inverse();
    let cam_from_cog = config.camera.cam_from_cog();
    let nominal_ground_from_cam = ground_from_cog.compose(&cam_from_cog.inverse());
    let second = config.second_camera.map(|m| (m.intrinsics, m.cam_from_cog()));

    let mut keyframes = Vec::with_capacity(frame_times.len());
    let mut frame_gfc = Vec::with_capacity(frame_times.len());
    let mut vehicle_states = Vec::with_capacity(frame_times.len());
    for &t in &frame_times {
        let state = true_tracker
            .state_at(t)
            .expect("frame time inside sample range");
        let world_from_cog = state.pose();
        let gfc = apply_extrinsic_schedule(
            &nominal_ground_from_cam,
            &config.extrinsic_schedule,
            t,
        );
        let world_from_cam = world_from_cog.compose(&cog_from_ground).compose(&gfc);
        let cam_from_world = world_from_cam.inverse();

        let mut observations = Vec::new();
        let mut second_pixels: Vec<(usize, PixelPoint)> = Vec::new();
        for (id, lm) in landmarks.iter().enumerate() {
            let in_cam = cam_from_world.transform_point(&lm.position);
            if let Some(px) = observe(&in_cam, &config.camera.intrinsics, config.max_range) {
                let noisy = add_pixel_noise(px, config.pixel_noise_sigma, &mut rng);
                if config.camera.intrinsics.contains(&noisy) {
                    observations.push(Observation {
                        point: PixelPoint::new(noisy.x, noisy.y, id as u64),
                        quality: lm.quality,
                    });
                }
            }
            if let Some((intr2, cam2_from_cog)) = &second {
                let world_from_cam2 = world_from_cog.compose(&cam2_from_cog.inverse());
                let in_cam2 = world_from_cam2.inverse().transform_point(&lm.position);
                if let Some(px2) = observe(&in_cam2, intr2, config.max_range) {
                    let noisy2 = add_pixel_noise(px2, config.pixel_noise_sigma, &mut rng);
                    if intr2.contains(&noisy2) {
                        second_pixels.push((id, PixelPoint::new(noisy2.x, noisy2.y, id as u64)));
                    }
                }
            }
        }
        let cross_matches = second_pixels
            .into_iter()
            .filter_map(|(id, second_px)| {
                observations
                    .iter()
                    .find(|o| o.point.track_id == id as u64)
                    .map(|o| CrossMatch {
                        front: o.point,
                        second: second_px,
                    })
            })
            .collect();

        keyframes.push(KeyframeObservations {
            timestamp: t,
            observations,
            cross_matches,
        });
        frame_gfc.push(gfc);
        vehicle_states.push(state);
    }

    // At least one track must persist across some consecutive frame pair.
    let mut any_persistent = false;
    for w in keyframes.windows(2) {
        if w[0]
            .observations
            .iter()
            .any(|o| w[1].find(o.point.track_id).is_some())
        {
            any_persistent = true;
            break;
        }
    }
    if !any_persistent {
        return Err(SimError::EmptyScene);
    }

    let track_labels = landmarks
        .iter()
        .enumerate()
        .map(|(id, lm)| TrackLabel {
            track_id: id as u64,
            on_ground: lm.on_ground,
        })
        .collect();

    Ok(Scenario {
        intrinsics: config.camera.intrinsics,
        second_intrinsics: second.as_ref().map(|(intr, _)| *intr),
        vehicle: config.vehicle,
        cam_from_cog,
        wheel_samples: measured_samples,
        keyframes,
        truth: ScenarioTruth {
            nominal_ground_from_cam,
            extrinsic_schedule: config.extrinsic_schedule.clone(),
            frame_ground_from_cam: frame_gfc,
            vehicle_states,
            track_labels,
            second_ground_from_cam: second
                .as_ref()
                .map(|(_, c2)| ground_from_cog.compose(&c2.inverse())),
        },
    })
}

fn integrated_states(tracker: &OdometryTracker) -> &[VehicleState] {
    // Internal accessor; states are one per sample.
    tracker.states()
}

fn observe(
    point_cam: &Vector3<f64>,
    intr: &CameraIntrinsics,
    max_range: f64,
) -> Option<Vector2<f64>> {
    if point_cam.z < 0.3 || point_cam.norm() > max_range {
        return None;
    }
    let px = project(point_cam, intr).ok()?;
    intr.contains(&px).then_some(px)
}

fn add_pixel_noise(px: Vector2<f64>, sigma: f64, rng: &mut ChaCha12Rng) -> Vector2<f64> {
    let du: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma;
    let dv: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma;
    Vector2::new(px.x + du, px.y + dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn generate_is_deterministic() {
        let config = ScenarioConfig {
            pixel_noise_sigma: 0.5,
            odometry_noise: OdometryNoise {
                speed_sigma: 0.1,
                steering_sigma: 0.002,
            },
            duration: 2.0,
            ..ScenarioConfig::default()
        };
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn structure_fraction_matches_config_within_binomial_bounds() {
        let config = ScenarioConfig {
            structure_fraction: 0.3,
            duration: 4.0,
            ..ScenarioConfig::default()
        };
        let scenario = generate(&config).unwrap();
        let n = scenario.truth.track_labels.len() as f64;
        let structure = scenario
            .truth
            .track_labels
            .iter()
            .filter(|l| !l.on_ground)
            .count() as f64;
        let p = 0.3;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!(
            (structure - n * p).abs() <= 3.0 * sigma,
            "structure count {structure} of {n} outside 3 sigma"
        );
    }

    #[test]
    fn ground_tracks_lie_exactly_on_the_plane() {
        let config = ScenarioConfig::default();
        let scenario = generate(&config).unwrap();
        // Reproject a few observations back to the ground and check the
        // residual is zero by construction: use the true extrinsic to map the
        // plane into each keyframe camera and verify the label bookkeeping.
        for (kf, gfc) in scenario
            .keyframes
            .iter()
            .zip(scenario.truth.frame_ground_from_cam.iter())
            .take(5)
        {
            let plane_normal_cam = gfc.rotation.row(2).transpose();
            let height = gfc.translation.z;
            assert!(height > 0.0);
            for obs in kf.observations.iter().take(50) {
                if scenario.truth.is_ground_track(obs.point.track_id) == Some(true) {
                    // Ray through the observation must intersect the plane in
                    // front of the camera (pure geometry sanity; noise-free).
                    let ray = crate::geom::backproject(&obs.point.coords(), &scenario.intrinsics);
                    let denom = ray.dot(&plane_normal_cam);
                    assert!(denom < 0.0, "ground ray must point below the horizon");
                }
            }
        }
    }

    #[test]
    fn schedule_step_and_ramp() {
        let nominal = RigidTransform::new(
            rotation_from_euler_zyx(0.1, -0.05, 0.02),
            Vector3::new(1.4, 0.02, 1.6),
        );
        assert_eq!(apply_extrinsic_schedule(&nominal, &[], 12.0), nominal);

        let pitch = 1.0f64.to_radians();
        let step = ExtrinsicPerturbation {
            start_time: 30.0,
            ramp_duration: 0.0,
            rotation_delta_rpy: [0.0, pitch, 0.0],
            height_delta: 0.0,
        };
        let before = apply_extrinsic_schedule(&nominal, &[step], 29.999);
        let after = apply_extrinsic_schedule(&nominal, &[step], 30.0);
        assert_eq!(before, nominal);
        let delta = before.rotation.transpose() * after.rotation;
        assert_relative_eq!(
            delta,
            rotation_from_euler_zyx(0.0, pitch, 0.0),
            epsilon = 1e-12
        );

        // Linear ramp: the midpoint carries half the rotation angle (slerp).
        let ramp = ExtrinsicPerturbation {
            start_time: 10.0,
            ramp_duration: 10.0,
            rotation_delta_rpy: [0.02, -0.01, 0.005],
            height_delta: 0.04,
        };
        let mid = apply_extrinsic_schedule(&nominal, &[ramp], 15.0);
        let full = rotation_from_euler_zyx(0.02, -0.01, 0.005);
        let half = crate::geom::exp_so3(&(crate::geom::log_so3(&full) * 0.5));
        assert_relative_eq!(
            nominal.rotation.transpose() * mid.rotation,
            half,
            epsilon = 1e-12
        );
        assert_relative_eq!(mid.translation.z, 1.6 + 0.02, epsilon = 1e-12);
        let done = apply_extrinsic_schedule(&nominal, &[ramp], 25.0);
        assert_relative_eq!(done.translation.z, 1.64, epsilon = 1e-12);
    }

    #[test]
    fn empty_scene_is_detected() {
        let config = ScenarioConfig {
            ground_feature_density: 0.0,
            duration: 1.0,
            ..ScenarioConfig::default()
        };
        assert!(matches!(generate(&config), Err(SimError::EmptyScene)));
    }

    #[test]
    fn driving_fraction_reflects_trajectory() {
        let config = ScenarioConfig {
            trajectory: TrajectoryKind::StopAndGo {
                cruise_speed: 8.0,
                period: 4.0,
            },
            duration: 8.0,
            ..ScenarioConfig::default()
        };
        let scenario = generate(&config).unwrap();
        let frac = scenario.driving_fraction();
        // The profile drives roughly 70% of each period.
        assert!((0.55..0.85).contains(&frac), "fraction {frac}");

        let straight = generate(&ScenarioConfig::default()).unwrap();
        assert_eq!(straight.driving_fraction(), 1.0);
    }
}
