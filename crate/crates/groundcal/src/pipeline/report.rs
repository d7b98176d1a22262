//! Calibration report schema: per-keyframe diagnostics, broadcast events,
//! failures and summary statistics. Serializes to versioned JSON and to a
//! per-keyframe CSV for plotting.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::GroundPlaneEstimate;
use crate::optimizer::FailureReason;
use crate::sim::serde_ts;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Fixed-bin histogram; integrates to the number of added samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: Vec<u64>,
    /// Samples beyond the last bin.
    pub overflow: u64,
    pub count: u64,
    pub sum: f64,
}

impl Histogram {
    pub fn new(bin_width: f64, bin_count: usize) -> Self {
        Self {
            bin_width,
            bins: vec![0; bin_count],
            overflow: 0,
            count: 0,
            sum: 0.0,
        }
    }

    pub fn add(&mut self, value: f64) {
        let idx = (value / self.bin_width).floor();
        if idx >= 0.0 && (idx as usize) < self.bins.len() {
            self.bins[idx as usize] += 1;
        } else {
            self.overflow += 1;
        }
        self.count += 1;
        self.sum += value;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    /// Fraction of samples at or below `value`.
    pub fn fraction_below(&self, value: f64) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let limit = (value / self.bin_width).floor() as usize;
        let below: u64 = self.bins.iter().take(limit.saturating_add(1)).sum();
        below as f64 / self.count as f64
    }

    pub fn integral(&self) -> u64 {
        self.bins.iter().sum::<u64>() + self.overflow
    }
}

/// One broadcast calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEvent {
    #[serde(with = "serde_ts")]
    pub timestamp: f64,
    pub keyframe_index: usize,
    pub segment: usize,
    /// `[roll, pitch, yaw, tx, ty, tz]`, radians and meters.
    pub xi: [f64; 6],
    pub z: [f64; 6],
    pub critical: f64,
    pub sample_count: usize,
}

/// A failure-detection event and the estimator restart it caused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    #[serde(with = "serde_ts")]
    pub timestamp: f64,
    pub keyframe_index: usize,
    pub reason: FailureReason,
    /// Segment that starts after this failure.
    pub new_segment: usize,
}

/// What happened at one selected keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub keyframe_index: usize,
    #[serde(with = "serde_ts")]
    pub timestamp: f64,
    pub segment: usize,
    /// Tracks matched between this keyframe and the previous one after the
    /// prediction gate.
    pub candidate_matches: usize,
    pub below_horizon: usize,
    pub grid_selected: usize,
    pub epipolar_inliers: Option<usize>,
    pub pose_accepted: Option<bool>,
    pub verified_ground: usize,
    pub plane_fit_points: usize,
    pub raw_plane: Option<GroundPlaneEstimate>,
    pub plane_quality_ok: Option<bool>,
    pub window_fill: usize,
    pub window_solved: bool,
    /// Mean transfer error of the newest pair under the optimized window, px.
    pub transfer_error_px: Option<f64>,
    /// Cross-camera feature residual error at this keyframe, px^2.
    pub residual_error_px2: Option<f64>,
    /// Current calibration estimate after this keyframe.
    pub estimate_xi: [f64; 6],
    pub failure: Option<FailureReason>,
}

/// Mean absolute calibration errors against scheduled truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub height_cm: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub keyframe_count: usize,
    pub pair_count: usize,
    pub window_solves: usize,
    pub report_count: usize,
    pub failure_count: usize,
    pub segments: usize,
    pub transfer_error: Histogram,
    pub residual_error: Option<Histogram>,
    pub deltas: Option<DeltaStats>,
    pub final_xi: Option<[f64; 6]>,
}

/// Full pipeline output for one scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub events: Vec<ReportEvent>,
    pub keyframes: Vec<KeyframeRecord>,
    pub failures: Vec<FailureEvent>,
    pub summary: Summary,
}

impl CalibrationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }

    /// One CSV row per keyframe, for external plotting.
    pub fn write_keyframe_csv(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("keyframes.csv"))?;
        writeln!(
            f,
            "keyframe_index,timestamp,segment,candidate_matches,below_horizon,grid_selected,\
             epipolar_inliers,pose_accepted,verified_ground,plane_fit_points,plane_height,\
             plane_quality_ok,window_fill,window_solved,transfer_error_px,residual_error_px2,\
             roll,pitch,yaw,tx,ty,tz,failure"
        )?;
        for k in &self.keyframes {
            writeln!(
                f,
                "{},{:.6},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
                k.keyframe_index,
                k.timestamp,
                k.segment,
                k.candidate_matches,
                k.below_horizon,
                k.grid_selected,
                k.epipolar_inliers.map_or(String::new(), |v| v.to_string()),
                k.pose_accepted.map_or(String::new(), |v| v.to_string()),
                k.verified_ground,
                k.plane_fit_points,
                k.raw_plane.map_or(String::new(), |p| format!("{:.6}", p.height)),
                k.plane_quality_ok.map_or(String::new(), |v| v.to_string()),
                k.window_fill,
                k.window_solved,
                k.transfer_error_px.map_or(String::new(), |v| format!("{v:.6}")),
                k.residual_error_px2.map_or(String::new(), |v| format!("{v:.6}")),
                k.estimate_xi[0],
                k.estimate_xi[1],
                k.estimate_xi[2],
                k.estimate_xi[3],
                k.estimate_xi[4],
                k.estimate_xi[5],
                k.failure.map_or(String::new(), |r| format!("{r:?}")),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_integrates_to_count() {
        let mut h = Histogram::new(0.1, 20);
        for i in 0..57 {
            h.add(0.03 * i as f64);
        }
        assert_eq!(h.count, 57);
        assert_eq!(h.integral(), 57);
        assert!(h.overflow > 0);
        assert!((h.mean().unwrap() - 0.03 * 28.0).abs() < 1e-12);
        assert!(h.fraction_below(2.0) >= h.fraction_below(0.2));
    }

    #[test]
    fn report_json_roundtrip() {
        let report = CalibrationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            events: vec![ReportEvent {
                timestamp: 1.23456789,
                keyframe_index: 4,
                segment: 0,
                xi: [0.1, -0.2, 0.3, 1.0, 0.0, 1.6],
                z: [0.5; 6],
                critical: 1.96,
                sample_count: 5,
            }],
            keyframes: Vec::new(),
            failures: Vec::new(),
            summary: Summary {
                keyframe_count: 10,
                pair_count: 9,
                window_solves: 3,
                report_count: 1,
                failure_count: 0,
                segments: 1,
                transfer_error: Histogram::new(0.05, 40),
                residual_error: None,
                deltas: None,
                final_xi: None,
            },
        };
        let text = report.to_json();
        let back = CalibrationReport::from_json(&text).unwrap();
        assert_eq!(report, back);
    }
}
