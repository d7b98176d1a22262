//! Online monocular camera-to-ground calibration.
//!
//! The crate estimates the rigid transform between a forward-looking vehicle
//! camera and the road surface while the vehicle drives, using only wheel
//! odometry and tracked image features:
//!
//! 1. [`odometry`] integrates wheel speed and steering through a kinematic
//!    bicycle model and converts vehicle motion into camera-frame motion.
//! 2. [`ground`] extracts road-surface features coarse-to-fine: horizon
//!    gating, motion-based feature prediction, grid thinning, an epipolar
//!    quality check and a three-point plane-consistency verification.
//! 3. [`optimizer`] refines relative camera poses and the ground plane in a
//!    sliding-window least-squares problem with marginalization, assembles
//!    the camera-to-ground rotation, averages results over time and gates
//!    reporting with a componentwise Z-test.
//! 4. [`sim`] generates deterministic synthetic drives with known ground
//!    truth so the whole pipeline can be validated end to end.
//! 5. [`pipeline`] wires everything into a driver that consumes a scenario
//!    and emits a calibration report with quality metrics.

pub mod geom;
pub mod ground;
pub mod odometry;
pub mod optimizer;
pub mod sim;

pub use geom::{
    backproject, fit_plane, project, triangulate, CameraIntrinsics, GeomError, GroundPlaneEstimate,
    GroundPoint3D, PixelPoint, RigidTransform,
};
pub use odometry::{
    integrate_stream, relative_vehicle_motion, vehicle_to_camera_motion, MotionFrame,
    OdometryTracker, RelativeMotion, VehicleParams, VehicleState, WheelSample,
};
