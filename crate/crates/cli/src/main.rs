//! `ortholoc`: simulate flights, calibrate matching scores, run the
//! localization filter and inspect matching behavior.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ortholoc::metrics::{GridRegion, MetricKind};
use ortholoc::pipeline::InitMode;

use commands::{CalibrateArgs, HeatmapArgs, LocalizeOverrides};
use config::{InitCenter, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "ortholoc", version, about = "Map-matching localization for UAVs with oblique cameras")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic flight and write it to a directory.
    Simulate {
        /// Scenario config (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a score model from true and random poses of a scenario.
    Calibrate {
        #[arg(long)]
        scenario: PathBuf,
        /// Reference map; the scenario's own map by default.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long, default_value = "ZNCC")]
        metric: MetricKind,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        random_poses: usize,
        #[arg(long, default_value_t = ortholoc::calib::DEFAULT_OMEGA)]
        omega: f64,
    },
    /// Run the localization filter over a stored scenario.
    Localize {
        /// Run config (TOML). Without it, --scenario and --model are required.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        metric: Option<MetricKind>,
        #[arg(long)]
        init_mode: Option<InitMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every batch's ortho image and mask.
        #[arg(long)]
        write_orthos: bool,
    },
    /// Rank all matching metrics by overlap of true and random scores.
    MatchBench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        random_poses: usize,
    },
    /// Score an ortho image over a translation grid of the map.
    RenderHeatmap {
        #[arg(long)]
        ortho: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value = "ZNCC")]
        metric: MetricKind,
        /// Grid corners in map meters: x0,y0,x1,y1.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        region: Vec<f64>,
        #[arg(long, default_value_t = 2.0)]
        step: f64,
        #[arg(long, default_value_t = 0.0)]
        theta_deg: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, seed, out } => commands::simulate(config.as_deref(), seed, &out),
        Command::Calibrate {
            scenario,
            map,
            metric,
            out,
            seed,
            random_poses,
            omega,
        } => commands::calibrate(&CalibrateArgs {
            scenario: &scenario,
            map: map.as_deref(),
            metric,
            out: &out,
            seed,
            random_poses,
            omega,
        })
        .map(|_| ()),
        Command::Localize {
            config,
            scenario,
            map,
            model,
            metric,
            init_mode,
            seed,
            out,
            write_orthos,
        } => {
            let mut cfg = match &config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig {
                    scenario_dir: scenario.clone().ok_or_else(|| CliError::Config("scenario: pass --scenario or --config".into()))?,
                    map_path: None,
                    model_path: model.clone().ok_or_else(|| CliError::Config("model: pass --model or --config".into()))?,
                    metric: None,
                    init_mode: InitMode::Inaccurate,
                    init_center: InitCenter::Named("truth".into()),
                    d: ortholoc::mcl::DEFAULT_INIT_SIDE_M,
                    particles: ortholoc::mcl::DEFAULT_PARTICLES,
                    rng_seed: 0,
                    output_dir: PathBuf::from("localize_out"),
                },
            };
            if let Some(s) = scenario {
                cfg.scenario_dir = s;
            }
            if let Some(m) = model {
                cfg.model_path = m;
            }
            if map.is_some() {
                cfg.map_path = map;
            }
            let overrides = LocalizeOverrides {
                seed,
                metric,
                init_mode,
                out,
                write_orthos,
            };
            commands::localize(cfg, &overrides).map(|_| ())
        }
        Command::MatchBench {
            scenario,
            map,
            out,
            seed,
            random_poses,
        } => commands::match_bench(&scenario, map.as_deref(), &out, seed, random_poses).map(|_| ()),
        Command::RenderHeatmap {
            ortho,
            mask,
            map,
            metric,
            region,
            step,
            theta_deg,
            scale,
            out,
        } => {
            if region.len() != 4 {
                return Err(CliError::Config(format!("region: expected x0,y0,x1,y1, got {} values", region.len())));
            }
            let region = GridRegion {
                x0: region[0],
                y0: region[1],
                x1: region[2],
                y1: region[3],
                step,
            };
            commands::render_heatmap(&HeatmapArgs {
                ortho: &ortho,
                mask: mask.as_deref(),
                map: &map,
                metric,
                region,
                theta_deg,
                scale,
                out: &out,
            })
            .map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
