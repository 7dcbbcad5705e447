//! Synthetic flights over procedural terrain: maps, trajectories, oblique
//! images, feature tracks and IMU increments.

mod config;
mod imu;
mod landscape;
mod render;
mod tracks;
mod trajectory;

use landscape::ValueNoise;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{Appearance, ImuNoise, ScenarioConfig, TrackSettings, DATASHEET_ARW_DEG_PER_SQRT_H, DATASHEET_VRW_MPS_PER_SQRT_H};
pub use imu::{imu_covariance, simulate_imu_increment, ImuIncrement};
pub use landscape::Landscape;
pub use render::render_oblique;
pub use tracks::{generate_feature_tracks, SimFeatureTrack, MIN_TRACKS_PER_FRAME};
pub use trajectory::{generate_trajectory, GroundTruthFrame, Path2};

use crate::geo::Pose3;
use crate::io::{read_georaster, read_pgm, write_georaster, write_pgm};
use crate::raster::{GeoRaster, GrayImage};
use crate::track::{FeatureTrack, Observation};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error("cannot parse scenario config: {0}")]
    Parse(String),
    #[error("waypoint ({x}, {y}) lies outside the map")]
    WaypointsOutsideMap { x: f64, y: f64 },
    #[error("trajectory is {0:.1} m long, need at least 500 m")]
    TrajectoryTooShort(f64),
    #[error("camera is not above the ground (z = {0})")]
    CameraBelowGround(f64),
    #[error("frame {frame} sees only {count} tracks")]
    InsufficientCoverage { frame: usize, count: usize },
    #[error("malformed scenario file {file}: {reason}")]
    Malformed { file: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

// Independent random streams so changing one stage leaves the others intact.
const STREAM_LANDSCAPE: u64 = 1;
const STREAM_APPEARANCE: u64 = 2;
const STREAM_TRACKS: u64 = 3;
const STREAM_IMU: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Truth texture at `map_mpp` and the perturbed 1 m/px reference map.
pub fn synthesize_map(config: &ScenarioConfig) -> Result<(GeoRaster, GeoRaster), SimError> {
    config.validate()?;
    let landscape = Landscape::new(&mut stream(config.seed, STREAM_LANDSCAPE), config.map_extent_m());
    let image = landscape.rasterize(config.map_size_px, config.map_mpp);
    let truth = GeoRaster::new(image, 0.0, 0.0, config.map_mpp).expect("landscape is finite");
    let plain = truth.downsample(config.downsample_factor());
    let reference = perturb(&plain, &config.appearance, &mut stream(config.seed, STREAM_APPEARANCE));
    Ok((truth, reference))
}

fn perturb(map: &GeoRaster, a: &Appearance, rng: &mut ChaCha8Rng) -> GeoRaster {
    if a.is_identity() {
        return map.clone();
    }
    let mut image = map.image.clone();
    for v in &mut image.data {
        *v = (a.gain * *v as f64 + a.offset) as f32;
    }
    image = image.gaussian_blur(a.blur_sigma_px);
    if a.noise_std > 0.0 {
        let noise = Normal::new(0.0, a.noise_std).expect("validated noise std");
        for v in &mut image.data {
            *v += noise.sample(rng) as f32;
        }
    }
    if a.patch_noise_std > 0.0 {
        let noise = ValueNoise { seed: rng.gen() };
        let w = image.width;
        let field: Vec<f64> = (0..image.data.len())
            .map(|i| noise.fbm((i % w) as f64 / a.patch_scale_px, (i / w) as f64 / a.patch_scale_px, 3))
            .collect();
        let n = field.len() as f64;
        let mean = field.iter().sum::<f64>() / n;
        let std = (field.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        for (v, f) in image.data.iter_mut().zip(&field) {
            *v += (a.patch_noise_std * (f - mean) / std) as f32;
        }
    }
    for v in &mut image.data {
        *v = v.clamp(0.0, 1.0);
    }
    GeoRaster { image, ..map.clone() }
}

/// A fully generated flight. Frame images are rendered on demand.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub truth_texture: GeoRaster,
    pub reference_map: GeoRaster,
    pub frames: Vec<GroundTruthFrame>,
    pub tracks: Vec<SimFeatureTrack>,
    /// One increment per frame after the first.
    pub imu: Vec<ImuIncrement>,
}

impl Scenario {
    pub fn generate(config: &ScenarioConfig) -> Result<Self, SimError> {
        let (truth_texture, reference_map) = synthesize_map(config)?;
        let frames = generate_trajectory(config)?;
        let tracks = generate_feature_tracks(&frames, &config.camera, config, &mut stream(config.seed, STREAM_TRACKS))?;
        let imu = simulate_imu(&frames, config, &mut stream(config.seed, STREAM_IMU));
        Ok(Self {
            config: config.clone(),
            truth_texture,
            reference_map,
            frames,
            tracks,
            imu,
        })
    }

    pub fn render_frame(&self, k: usize) -> Result<GrayImage, SimError> {
        render_oblique(&self.truth_texture, &self.frames[k].camera_pose, &self.config.camera)
    }

    pub fn feature_tracks(&self) -> Vec<FeatureTrack> {
        self.tracks.iter().map(|t| t.track.clone()).collect()
    }

    /// Writes the scenario directory: config, maps, truth, tracks, IMU and
    /// every `frame_image_stride`-th frame image.
    pub fn save(&self, dir: &Path) -> Result<(), SimError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.config.to_toml())?;
        write_georaster(&dir.join("map.pgm"), &self.reference_map)?;
        write_georaster(&dir.join("truth_texture.pgm"), &self.truth_texture)?;

        let mut w = csv::Writer::from_path(dir.join("truth.csv")).map_err(csv_err)?;
        for f in &self.frames {
            w.serialize(TruthRow::from_frame(f)).map_err(csv_err)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("tracks.csv")).map_err(csv_err)?;
        for t in &self.tracks {
            for o in &t.track.observations {
                w.serialize(TrackRow {
                    track_id: t.track.id,
                    frame_index: o.frame,
                    u: o.pixel.x,
                    v: o.pixel.y,
                })
                .map_err(csv_err)?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("imu.csv")).map_err(csv_err)?;
        for inc in &self.imu {
            w.serialize(ImuRow::from_increment(inc)).map_err(csv_err)?;
        }
        w.flush()?;

        for k in (0..self.frames.len()).step_by(self.config.frame_image_stride) {
            write_pgm(&frame_path(dir, k), &self.render_frame(k)?)?;
        }
        Ok(())
    }
}

fn simulate_imu(frames: &[GroundTruthFrame], config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<ImuIncrement> {
    let tau = 1.0 / config.frame_rate_hz;
    frames
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let truth = w[0].camera_pose.between(&w[1].camera_pose);
            ImuIncrement {
                frame_index: i + 1,
                delta: simulate_imu_increment(&truth, tau, &config.imu, rng),
                tau,
            }
        })
        .collect()
}

pub fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("frame_{k:06}.pgm"))
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Malformed {
        file: "csv".into(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    timestamp: f64,
    x: f64,
    y: f64,
    z: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

impl TruthRow {
    fn from_frame(f: &GroundTruthFrame) -> Self {
        let (t, q) = (&f.camera_pose.translation, f.camera_pose.rotation.quaternion());
        Self {
            timestamp: f.timestamp,
            x: t.x,
            y: t.y,
            z: t.z,
            qw: q.w,
            qx: q.i,
            qy: q.j,
            qz: q.k,
        }
    }

    fn to_frame(&self) -> GroundTruthFrame {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(self.qw, self.qx, self.qy, self.qz));
        GroundTruthFrame {
            timestamp: self.timestamp,
            camera_pose: Pose3::new(q, Vector3::new(self.x, self.y, self.z)),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackRow {
    track_id: usize,
    frame_index: usize,
    u: f64,
    v: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    frame_index: usize,
    dx: f64,
    dy: f64,
    dz: f64,
    drx: f64,
    dry: f64,
    drz: f64,
    tau: f64,
}

impl ImuRow {
    fn from_increment(inc: &ImuIncrement) -> Self {
        let (t, r) = (&inc.delta.translation, crate::geo::so3_log(&inc.delta.rotation));
        Self {
            frame_index: inc.frame_index,
            dx: t.x,
            dy: t.y,
            dz: t.z,
            drx: r.x,
            dry: r.y,
            drz: r.z,
            tau: inc.tau,
        }
    }
}

/// A scenario directory read back from disk. Frame images are loaded lazily.
#[derive(Debug, Clone)]
pub struct ScenarioRecord {
    pub dir: PathBuf,
    pub config: ScenarioConfig,
    pub reference_map: GeoRaster,
    pub frames: Vec<GroundTruthFrame>,
    pub tracks: Vec<FeatureTrack>,
    pub imu: Vec<ImuIncrement>,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, SimError> {
    let malformed = |reason: String| SimError::Malformed {
        file: path.display().to_string(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| malformed(e.to_string()))).collect()
}

impl ScenarioRecord {
    pub fn load(dir: &Path) -> Result<Self, SimError> {
        let config = ScenarioConfig::from_toml(&fs::read_to_string(dir.join("config.toml"))?)?;
        let reference_map = read_georaster(&dir.join("map.pgm"))?;
        let frames: Vec<GroundTruthFrame> = read_rows::<TruthRow>(&dir.join("truth.csv"))?.iter().map(TruthRow::to_frame).collect();

        let mut tracks: Vec<FeatureTrack> = Vec::new();
        for row in read_rows::<TrackRow>(&dir.join("tracks.csv"))? {
            let obs = Observation {
                frame: row.frame_index,
                pixel: Vector2::new(row.u, row.v),
            };
            match tracks.last_mut() {
                Some(t) if t.id == row.track_id => t.observations.push(obs),
                _ => tracks.push(FeatureTrack {
                    id: row.track_id,
                    observations: vec![obs],
                }),
            }
        }

        let imu = read_rows::<ImuRow>(&dir.join("imu.csv"))?
            .into_iter()
            .map(|r| {
                let rotation = UnitQuaternion::from_scaled_axis(Vector3::new(r.drx, r.dry, r.drz));
                ImuIncrement {
                    frame_index: r.frame_index,
                    delta: Pose3::new(rotation, Vector3::new(r.dx, r.dy, r.dz)).with_covariance(imu_covariance(&config.imu, r.tau)),
                    tau: r.tau,
                }
            })
            .collect::<Vec<_>>();
        if frames.len() < 2 || imu.len() + 1 != frames.len() {
            return Err(SimError::Malformed {
                file: "imu.csv".into(),
                reason: format!("{} increments for {} frames", imu.len(), frames.len()),
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            reference_map,
            frames,
            tracks,
            imu,
        })
    }

    /// The stored image for frame `k`, if one was written.
    pub fn frame_image(&self, k: usize) -> Option<io::Result<GrayImage>> {
        let path = frame_path(&self.dir, k);
        path.exists().then(|| read_pgm(&path))
    }
}
