use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use ortholoc::metrics::MetricKind;
use ortholoc::pipeline::InitMode;
use serde::Deserialize;

use crate::error::CliError;

/// Where the initial particle square is centered.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum InitCenter {
    /// Only `"truth"` is accepted.
    Named(String),
    Point([f64; 2]),
}

impl InitCenter {
    pub fn resolve(&self) -> Result<Option<Vector2<f64>>, CliError> {
        match self {
            Self::Named(n) if n == "truth" => Ok(None),
            Self::Named(n) => Err(CliError::Config(format!("init_center: expected \"truth\" or [x, y], got \"{n}\""))),
            Self::Point([x, y]) => Ok(Some(Vector2::new(*x, *y))),
        }
    }
}

/// Settings of one localization run, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario_dir: PathBuf,
    /// Defaults to the scenario's own `map.pgm`.
    pub map_path: Option<PathBuf>,
    pub model_path: PathBuf,
    /// Must agree with the model when given.
    pub metric: Option<MetricKind>,
    #[serde(default = "default_init_mode")]
    pub init_mode: InitMode,
    #[serde(default = "default_center")]
    pub init_center: InitCenter,
    #[serde(default = "default_side")]
    pub d: f64,
    #[serde(default = "default_particles", rename = "P")]
    pub particles: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_init_mode() -> InitMode {
    InitMode::Inaccurate
}

fn default_center() -> InitCenter {
    InitCenter::Named("truth".into())
}

fn default_side() -> f64 {
    ortholoc::mcl::DEFAULT_INIT_SIDE_M
}

fn default_particles() -> usize {
    ortholoc::mcl::DEFAULT_PARTICLES
}

fn default_output() -> PathBuf {
    PathBuf::from("localize_out")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn map_path(&self) -> PathBuf {
        self.map_path.clone().unwrap_or_else(|| self.scenario_dir.join("map.pgm"))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.particles < 1 {
            return Err(CliError::Config("P must be at least 1".into()));
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(CliError::Config(format!("d must be positive, got {}", self.d)));
        }
        self.init_center.resolve()?;
        for (key, path) in [("scenario_dir", self.scenario_dir.clone()), ("map_path", self.map_path()), ("model_path", self.model_path.clone())] {
            if !path.exists() {
                return Err(CliError::Config(format!("{key}: {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str("scenario_dir = \"s\"\nmodel_path = \"m.toml\"\n").unwrap();
        assert_eq!(cfg.particles, 1000);
        assert_eq!(cfg.d, 200.0);
        assert_eq!(cfg.init_mode, InitMode::Inaccurate);
        assert_eq!(cfg.init_center.resolve().unwrap(), None);
        assert_eq!(cfg.map_path(), PathBuf::from("s/map.pgm"));
    }

    #[test]
    fn center_point_and_bad_name() {
        let cfg: RunConfig = toml::from_str("scenario_dir = \"s\"\nmodel_path = \"m\"\ninit_center = [10.0, 20.5]\nmetric = \"ZNCC\"\nP = 5\n").unwrap();
        assert_eq!(cfg.init_center.resolve().unwrap(), Some(Vector2::new(10.0, 20.5)));
        assert_eq!(cfg.metric, Some(MetricKind::Zncc));
        assert_eq!(cfg.particles, 5);
        assert!(InitCenter::Named("origin".into()).resolve().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("scenario_dir = \"s\"\nmodel_path = \"m\"\nparticles = 3\n").is_err());
    }
}
