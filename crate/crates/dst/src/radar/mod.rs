//! Synthetic UWB radar: CIR windows with ground-truth vitals and labels.
//!
//! A seated subject reflects the transmitted pulse at a range bin set by
//! their distance; chest displacement from respiration and heartbeat phase-
//! modulates the return. Windows carry the ground truth they were generated
//! from, so estimators and the trained network can be scored without any
//! real capture hardware.

mod io;
mod spectral;
mod synth;

pub use io::{read_dataset, write_dataset, write_manifest, DatasetReader, DatasetWriter};
pub use spectral::{estimate_vitals, VitalsEstimate, HR_BAND_HZ, RR_BAND_HZ};
pub use synth::{
    sample_physique, sweep_dataset, synth_session, synth_window, SweepFactor, SweepGroup,
};

use num_complex::Complex;
use thiserror::Error;

pub type C32 = Complex<f32>;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Highest vital frequency the simulator will ever place (top of the HR band).
pub const MAX_VITAL_HZ: f64 = 3.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error("range: {0}")]
    Range(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Radar front-end and windowing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarConfig {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    /// Transmitted frames per second (slow-time sampling rate).
    pub fps: usize,
    pub fov_deg: f64,
    /// Fast-time samples per frame (range bins), M.
    pub range_bins: usize,
    /// Window width in seconds.
    pub window_s: f64,
    /// Sliding stride between window starts, seconds.
    pub stride_s: f64,
    /// Slow-time group-averaging factor applied by the preprocessing.
    pub slow_time_downsample: usize,
    /// Target SNR in dB, referenced to the return amplitude at 1 m.
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
    /// Static clutter amplitude relative to the 1 m return; 0 disables.
    pub clutter_scale: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        RadarConfig {
            carrier_hz: 7.3e9,
            bandwidth_hz: 1.4e9,
            fps: 150,
            fov_deg: 65.0,
            range_bins: 96,
            window_s: 5.0,
            stride_s: 5.0,
            slow_time_downsample: 5,
            snr_db: 15.0,
            clutter_scale: 0.5,
        }
    }
}

impl RadarConfig {
    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Range resolution c / (2·bandwidth).
    pub fn range_res_m(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth_hz)
    }

    /// Raw slow-time frames in one window.
    pub fn frames_per_window(&self) -> usize {
        (self.window_s * self.fps as f64).round() as usize
    }

    /// Downsampled slow-time length L seen by the network.
    pub fn slow_len(&self) -> usize {
        self.frames_per_window() / self.slow_time_downsample
    }

    /// One-sided spectrum length N = floor(M/2) + 1.
    pub fn spec_bins(&self) -> usize {
        self.range_bins / 2 + 1
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.carrier_hz > 0.0 && self.bandwidth_hz > 0.0) {
            return Err(SimError::Config("carrier and bandwidth must be positive".into()));
        }
        if (self.fps as f64) <= 2.0 * MAX_VITAL_HZ {
            return Err(SimError::Config(format!(
                "fps {} must exceed twice the maximum vital frequency {} Hz",
                self.fps, MAX_VITAL_HZ
            )));
        }
        if self.range_bins < 8 {
            return Err(SimError::Config(format!(
                "range_bins {} below minimum 8",
                self.range_bins
            )));
        }
        if !(self.window_s > 0.0 && self.stride_s > 0.0) {
            return Err(SimError::Config("window_s and stride_s must be positive".into()));
        }
        if self.slow_time_downsample == 0
            || self.frames_per_window() % self.slow_time_downsample != 0
        {
            return Err(SimError::Config(format!(
                "window frames {} not divisible by slow_time_downsample {}",
                self.frames_per_window(),
                self.slow_time_downsample
            )));
        }
        if self.snr_db.is_nan() || self.clutter_scale < 0.0 {
            return Err(SimError::Config("snr_db must not be NaN; clutter_scale >= 0".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 180.0) {
            return Err(SimError::Config(format!("fov_deg {} outside (0, 180]", self.fov_deg)));
        }
        Ok(())
    }
}

/// Instantaneous subject ground truth attached to a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectState {
    pub hr_bpm: f64,
    pub rr_bpm: f64,
    /// Heartbeat chest displacement amplitude, metres.
    pub hr_amp_m: f64,
    /// Respiration chest displacement amplitude, metres.
    pub rr_amp_m: f64,
    pub distance_m: f64,
    pub angle_deg: f64,
    /// Body-motion artifact intensity in [0, 1].
    pub motion_level: f64,
    pub stressed: bool,
}

impl SubjectState {
    pub fn validate(&self, cfg: &RadarConfig) -> Result<(), SimError> {
        if !(40.0..=180.0).contains(&self.hr_bpm) {
            return Err(SimError::Validation(format!("hr_bpm {} outside 40..=180", self.hr_bpm)));
        }
        if !(6.0..=40.0).contains(&self.rr_bpm) {
            return Err(SimError::Validation(format!("rr_bpm {} outside 6..=40", self.rr_bpm)));
        }
        if !(0.3..=3.0).contains(&self.distance_m) {
            return Err(SimError::Validation(format!(
                "distance_m {} outside sensing range 0.3..=3.0",
                self.distance_m
            )));
        }
        if !(0.0..cfg.fov_deg / 2.0).contains(&self.angle_deg) {
            return Err(SimError::Validation(format!(
                "angle_deg {} outside [0, fov/2 = {})",
                self.angle_deg,
                cfg.fov_deg / 2.0
            )));
        }
        if !(self.hr_amp_m > 0.0 && self.rr_amp_m > 0.0 && self.hr_amp_m < 0.02 && self.rr_amp_m < 0.05)
        {
            return Err(SimError::Validation("displacement amplitudes implausible".into()));
        }
        if !(0.0..=1.0).contains(&self.motion_level) {
            return Err(SimError::Validation(format!(
                "motion_level {} outside [0, 1]",
                self.motion_level
            )));
        }
        Ok(())
    }
}

/// One labeled CIR window: raw complex frames plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CirWindow {
    /// Row-major [frames x range_bins] complex samples.
    pub cir: Vec<C32>,
    pub label: u8,
    pub truth: SubjectState,
    pub session_id: u32,
    /// Window start time within its session, seconds.
    pub t0: f64,
}

impl CirWindow {
    pub fn frames(&self, cfg: &RadarConfig) -> usize {
        self.cir.len() / cfg.range_bins
    }

    pub fn all_finite(&self) -> bool {
        self.cir.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

// ── Session protocol ──

/// Task kinds in the induction timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Neutral,
    NonStress,
    Stress,
}

/// Timeline: neutral 2 min, non-stress 10, neutral 2, stress 5, neutral 2,
/// stress 5 (26 minutes total).
pub const SESSION_SEGMENTS: [(TaskKind, f64); 6] = [
    (TaskKind::Neutral, 120.0),
    (TaskKind::NonStress, 600.0),
    (TaskKind::Neutral, 120.0),
    (TaskKind::Stress, 300.0),
    (TaskKind::Neutral, 120.0),
    (TaskKind::Stress, 300.0),
];

pub fn session_duration_s() -> f64 {
    SESSION_SEGMENTS.iter().map(|&(_, d)| d).sum()
}

/// Task kind covering [t0, t0+len), or None if the span straddles segments.
pub fn segment_at(t0: f64, len: f64) -> Option<TaskKind> {
    let mut start = 0.0;
    for &(kind, dur) in &SESSION_SEGMENTS {
        let end = start + dur;
        if t0 >= start - 1e-9 && t0 + len <= end + 1e-9 {
            return Some(kind);
        }
        start = end;
    }
    None
}

/// All windows of one simulated session; only stress/non-stress task windows
/// carry labels and enter `windows`, neutral ones are counted but dropped.
#[derive(Debug)]
pub struct Session {
    pub windows: Vec<CirWindow>,
    pub total_windows: usize,
    pub excluded: usize,
    pub session_id: u32,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_constants() {
        let cfg = RadarConfig::default();
        cfg.validate().unwrap();
        assert!((cfg.wavelength_m() - 0.04107).abs() < 5e-5);
        assert!((cfg.range_res_m() - 0.107).abs() < 5e-4);
        assert_eq!(cfg.frames_per_window(), 750);
        assert_eq!(cfg.slow_len(), 150);
        assert_eq!(cfg.spec_bins(), 49);
    }

    #[test]
    fn phase_deviation_for_one_millimetre() {
        let cfg = RadarConfig::default();
        let dev = 4.0 * std::f64::consts::PI * 0.001 / cfg.wavelength_m();
        assert!((dev - 0.3060).abs() < 2e-4);
    }

    #[test]
    fn session_timeline_arithmetic() {
        assert_eq!(session_duration_s(), 1560.0);
        assert_eq!(segment_at(0.0, 5.0), Some(TaskKind::Neutral));
        assert_eq!(segment_at(120.0, 5.0), Some(TaskKind::NonStress));
        assert_eq!(segment_at(840.0, 5.0), Some(TaskKind::Stress));
        // A window straddling a boundary belongs to no segment.
        assert_eq!(segment_at(118.0, 5.0), None);
    }

    #[test]
    fn config_rejections() {
        let mut cfg = RadarConfig {
            fps: 6,
            ..RadarConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));
        cfg.fps = 150;
        cfg.range_bins = 4;
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));
        cfg.range_bins = 96;
        cfg.slow_time_downsample = 7;
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));
    }

    #[test]
    fn subject_rejections() {
        let cfg = RadarConfig::default();
        let good = SubjectState {
            hr_bpm: 70.0,
            rr_bpm: 15.0,
            hr_amp_m: 4e-4,
            rr_amp_m: 6e-3,
            distance_m: 1.0,
            angle_deg: 10.0,
            motion_level: 0.2,
            stressed: false,
        };
        good.validate(&cfg).unwrap();
        let far = SubjectState {
            distance_m: 3.5,
            ..good
        };
        assert!(matches!(far.validate(&cfg), Err(SimError::Validation(_))));
        let wide = SubjectState {
            angle_deg: 40.0,
            ..good
        };
        assert!(matches!(wide.validate(&cfg), Err(SimError::Validation(_))));
    }
}
