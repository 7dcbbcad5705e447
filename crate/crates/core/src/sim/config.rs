use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geo::CameraIntrinsics;

/// Datasheet angular random walk, 0.26 °/√h.
pub const DATASHEET_ARW_DEG_PER_SQRT_H: f64 = 0.26;
/// Datasheet velocity random walk, 0.029 m/s/√h.
pub const DATASHEET_VRW_MPS_PER_SQRT_H: f64 = 0.029;

/// IMU random-walk coefficients in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    /// Velocity random walk, m·s^(-3/2).
    pub nv: f64,
    /// Angular random walk, rad·s^(-1/2).
    pub nw: f64,
}

impl ImuNoise {
    /// Converts datasheet units (m/s/√h and °/√h) to SI.
    pub fn from_datasheet(vrw_mps_per_sqrt_h: f64, arw_deg_per_sqrt_h: f64) -> Self {
        Self {
            nv: vrw_mps_per_sqrt_h / 60.0,
            nw: (arw_deg_per_sqrt_h / 60.0).to_radians(),
        }
    }

    pub fn zero() -> Self {
        Self { nv: 0.0, nw: 0.0 }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            nv: self.nv * factor,
            nw: self.nw * factor,
        }
    }

    /// Rotation standard deviation per axis after `tau` seconds, radians.
    pub fn sigma_rotation(&self, tau: f64) -> f64 {
        self.nw * tau.sqrt()
    }

    /// Position standard deviation per axis after `tau` seconds, meters.
    pub fn sigma_translation(&self, tau: f64) -> f64 {
        self.nv * tau.powf(1.5)
    }
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self::from_datasheet(DATASHEET_VRW_MPS_PER_SQRT_H, DATASHEET_ARW_DEG_PER_SQRT_H)
    }
}

/// Gain/offset, blur and additive noise separating the reference map from
/// the scene the UAV sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Appearance {
    pub gain: f64,
    pub offset: f64,
    pub blur_sigma_px: f64,
    pub noise_std: f64,
    /// Amplitude of smooth additive noise, standing in for crop and
    /// moisture changes that move whole patches of ground at once.
    pub patch_noise_std: f64,
    /// Correlation length of the patch noise, map pixels.
    pub patch_scale_px: f64,
}

impl Appearance {
    pub fn identity() -> Self {
        Self {
            gain: 1.0,
            offset: 0.0,
            blur_sigma_px: 0.0,
            noise_std: 0.0,
            patch_noise_std: 0.0,
            patch_scale_px: 50.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            gain: 0.8,
            offset: 0.1,
            blur_sigma_px: 1.5,
            noise_std: 0.08,
            patch_noise_std: 0.15,
            patch_scale_px: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackSettings {
    /// Tracks kept alive per frame.
    pub per_frame: usize,
    pub min_lifetime_s: f64,
    pub max_lifetime_s: f64,
}

impl Default for TrackSettings {
    fn default() -> Self {
        Self {
            per_frame: 80,
            min_lifetime_s: 3.0,
            max_lifetime_s: 12.0,
        }
    }
}

/// Everything needed to generate a synthetic flight deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub map_size_px: usize,
    /// Resolution of the truth texture; its inverse must be an integer.
    pub map_mpp: f64,
    pub altitude_m: f64,
    pub camera_off_nadir_deg: f64,
    pub trajectory_waypoints: Vec<[f64; 2]>,
    pub speed_mps: f64,
    pub turn_radius_m: f64,
    pub frame_rate_hz: f64,
    pub pixel_noise_std_px: f64,
    pub track_outlier_rate: f64,
    pub imu: ImuNoise,
    pub appearance: Appearance,
    pub camera: CameraIntrinsics,
    pub tracks: TrackSettings,
    /// Only every n-th frame image is written when a scenario is saved.
    pub frame_image_stride: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            map_size_px: 3000,
            map_mpp: 1.0,
            altitude_m: 92.0,
            camera_off_nadir_deg: 52.6,
            trajectory_waypoints: vec![[600.0, 600.0], [2400.0, 700.0], [2300.0, 2000.0]],
            speed_mps: 10.0,
            turn_radius_m: 150.0,
            frame_rate_hz: 10.0,
            pixel_noise_std_px: 1.0,
            track_outlier_rate: 0.05,
            imu: ImuNoise::default(),
            appearance: Appearance::default(),
            camera: CameraIntrinsics::default(),
            tracks: TrackSettings::default(),
            frame_image_stride: 10,
        }
    }
}

impl ScenarioConfig {
    pub fn map_extent_m(&self) -> f64 {
        self.map_size_px as f64 * self.map_mpp
    }

    /// Truth pixels per reference-map pixel.
    pub fn downsample_factor(&self) -> usize {
        (1.0 / self.map_mpp).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |key: &'static str, reason: String| Err(SimError::InvalidConfig { key, reason });
        if !(self.altitude_m > 0.0) {
            return bad("altitude_m", format!("must be positive, got {}", self.altitude_m));
        }
        if self.map_size_px < 512 {
            return bad("map_size_px", format!("must be at least 512, got {}", self.map_size_px));
        }
        let inv = 1.0 / self.map_mpp;
        if !(self.map_mpp > 0.0 && self.map_mpp <= 1.0 && (inv - inv.round()).abs() < 1e-9) {
            return bad("map_mpp", format!("must be 1/n for integer n, got {}", self.map_mpp));
        }
        if !(self.frame_rate_hz > 0.0) {
            return bad("frame_rate_hz", format!("must be positive, got {}", self.frame_rate_hz));
        }
        if !(self.speed_mps > 0.0) {
            return bad("speed_mps", format!("must be positive, got {}", self.speed_mps));
        }
        if !(0.0..0.5).contains(&self.track_outlier_rate) {
            return bad("track_outlier_rate", format!("must be in [0, 0.5), got {}", self.track_outlier_rate));
        }
        if !(self.pixel_noise_std_px >= 0.0) {
            return bad("pixel_noise_std_px", "must be non-negative".into());
        }
        if !(self.imu.nv >= 0.0 && self.imu.nw >= 0.0) {
            return bad("imu", "random-walk coefficients must be non-negative".into());
        }
        if !(0.0..90.0).contains(&self.camera_off_nadir_deg) {
            return bad("camera_off_nadir_deg", format!("must be in [0, 90), got {}", self.camera_off_nadir_deg));
        }
        if self.trajectory_waypoints.len() < 2 {
            return bad("trajectory_waypoints", "need at least two waypoints".into());
        }
        if self.tracks.per_frame < 50 || self.tracks.min_lifetime_s <= 0.0 || self.tracks.max_lifetime_s < self.tracks.min_lifetime_s {
            return bad("tracks", "need per_frame >= 50 and 0 < min_lifetime_s <= max_lifetime_s".into());
        }
        if self.frame_image_stride == 0 {
            return bad("frame_image_stride", "must be at least 1".into());
        }
        if let Err(e) = self.camera.validate() {
            return bad("camera", e.to_string());
        }
        let a = &self.appearance;
        if !(a.gain > 0.0 && a.blur_sigma_px >= 0.0 && a.noise_std >= 0.0 && a.patch_noise_std >= 0.0 && a.patch_scale_px > 0.0) {
            return bad("appearance", "need gain > 0, patch_scale_px > 0 and non-negative blur and noise".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datasheet_conversion() {
        let n = ImuNoise::default();
        assert!((n.nv - 4.8333e-4).abs() < 1e-7);
        assert!((n.nw.to_degrees() - 4.3333e-3).abs() < 1e-7);
        assert!((n.sigma_rotation(100.0).to_degrees() - 0.043333).abs() < 1e-6);
        assert!((n.sigma_translation(100.0) - 0.48333).abs() < 1e-5);
        assert_eq!(n.sigma_rotation(0.0), 0.0);
    }

    #[test]
    fn validation_names_the_key() {
        let cfg = ScenarioConfig {
            altitude_m: -5.0,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("altitude"), "{err}");
        let cfg = ScenarioConfig {
            track_outlier_rate: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("track_outlier_rate"));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ScenarioConfig::default();
        assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = ScenarioConfig::from_toml("seed = 9\naltitude_m = 120.0\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.map_size_px, 3000);
    }
}
