use std::fs;
use std::path::{Path, PathBuf};

use ortholoc::calib::{rank_metrics, PairedHistogram, ScoreModel, DEFAULT_BINS};
use ortholoc::io::{read_georaster, write_pgm};
use ortholoc::metrics::{score_grid, score_series, score_series_multi, GridRegion, MetricKind, ScoreSeries};
use ortholoc::ortho::OrthoImage;
use ortholoc::pipeline::{posed_orthos, run_mcl, run_vio, BatchRecord, BeliefRow, Flight, InitMode, MclOptions, RunSummary, VioOptions};
use ortholoc::raster::{GeoRaster, GrayImage, INVALID};
use ortholoc::sim::{Scenario, ScenarioConfig, ScenarioRecord, SimError};

use crate::config::RunConfig;
use crate::error::CliError;

/// Fewest true-pose scores a calibration or benchmark accepts.
pub const MIN_TRUE_SCORES: usize = 10;

pub fn simulate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            ScenarioConfig::from_toml(&text).map_err(CliError::config)?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let scenario = Scenario::generate(&cfg).map_err(|e| match e {
        SimError::Io(e) => CliError::output(e),
        other => CliError::config(other),
    })?;
    scenario.save(out).map_err(CliError::output)?;
    println!(
        "wrote {} frames ({} tracks) to {}",
        scenario.frames.len(),
        scenario.tracks.len(),
        out.display()
    );
    Ok(())
}

fn load_scenario(dir: &Path) -> Result<ScenarioRecord, CliError> {
    ScenarioRecord::load(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn load_map(path: &Path) -> Result<GeoRaster, CliError> {
    read_georaster(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// VIO and orthorectification over a stored scenario, odometry anchored at
/// the true first pose.
fn process(record: &ScenarioRecord, seed: u64) -> Result<(Flight, Vec<BatchRecord>), CliError> {
    let flight = Flight::from_record(record);
    let first = &flight.truth.first().ok_or_else(|| CliError::Data("scenario has no frames".into()))?.camera_pose;
    let options = VioOptions {
        ransac_seed: seed,
        ..VioOptions::default()
    };
    let batches = run_vio(&flight, record, first, &options).map_err(CliError::data)?;
    Ok((flight, batches))
}

pub struct CalibrateArgs<'a> {
    pub scenario: &'a Path,
    pub map: Option<&'a Path>,
    pub metric: MetricKind,
    pub out: &'a Path,
    pub seed: u64,
    pub random_poses: usize,
    pub omega: f64,
}

pub fn calibrate(args: &CalibrateArgs) -> Result<ScoreModel, CliError> {
    if !(args.omega >= 0.0) {
        return Err(CliError::Config(format!("omega must be non-negative, got {}", args.omega)));
    }
    let record = load_scenario(args.scenario)?;
    let map = match args.map {
        Some(p) => load_map(p)?,
        None => record.reference_map.clone(),
    };
    let (flight, batches) = process(&record, args.seed)?;
    let posed = posed_orthos(&flight, &batches);
    let series = score_series(&posed, &map, args.metric, args.random_poses, args.seed);
    if series.true_scores.len() < MIN_TRUE_SCORES {
        return Err(CliError::Data(format!(
            "only {} true-pose scores, need {MIN_TRUE_SCORES}",
            series.true_scores.len()
        )));
    }
    let model = ScoreModel::from_series(args.metric, &series, args.omega).map_err(CliError::data)?;
    model.save(args.out).map_err(CliError::output)?;
    let mean_true = mean(series.true_scores.iter().map(|c| model.posterior_weight(*c)));
    let mean_random = mean(series.random_scores.iter().map(|c| model.posterior_weight(*c)));
    println!(
        "{}: {} true / {} random scores ({} skipped); mean posterior true {mean_true:.3}, random {mean_random:.3}",
        args.metric,
        series.true_scores.len(),
        series.random_scores.len(),
        series.skipped
    );
    Ok(model)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Overrides applied on top of a run config file.
#[derive(Debug, Default)]
pub struct LocalizeOverrides {
    pub seed: Option<u64>,
    pub metric: Option<MetricKind>,
    pub init_mode: Option<InitMode>,
    pub out: Option<PathBuf>,
    pub write_orthos: bool,
}

pub fn localize(mut cfg: RunConfig, overrides: &LocalizeOverrides) -> Result<RunSummary, CliError> {
    if let Some(s) = overrides.seed {
        cfg.rng_seed = s;
    }
    if let Some(m) = overrides.metric {
        cfg.metric = Some(m);
    }
    if let Some(m) = overrides.init_mode {
        cfg.init_mode = m;
    }
    if let Some(o) = &overrides.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let model = ScoreModel::load(&cfg.model_path).map_err(|e| CliError::Config(format!("{}: {e}", cfg.model_path.display())))?;
    if let Some(m) = cfg.metric {
        if m != model.metric {
            return Err(CliError::Config(format!("metric: run asks for {m} but the model was fitted for {}", model.metric)));
        }
    }
    let map = load_map(&cfg.map_path())?;
    let record = load_scenario(&cfg.scenario_dir)?;
    let (flight, batches) = process(&record, cfg.rng_seed)?;

    fs::create_dir_all(&cfg.output_dir).map_err(CliError::output)?;
    if overrides.write_orthos {
        let dir = cfg.output_dir.join("orthos");
        fs::create_dir_all(&dir).map_err(CliError::output)?;
        for o in batches.iter().filter_map(|b| b.ortho.as_ref()) {
            o.write_pair(&dir).map_err(CliError::output)?;
        }
    }

    let options = MclOptions {
        particles: cfg.particles,
        init_mode: cfg.init_mode,
        init_center: cfg.init_center.resolve()?,
        init_side_m: cfg.d,
        seed: cfg.rng_seed,
        ..MclOptions::default()
    };
    let (rows, diverged) = match run_mcl(&flight, &batches, &map, &model, &options) {
        Ok(rows) => (rows, None),
        Err(e) => {
            let msg = e.to_string();
            (e.rows, Some(msg))
        }
    };
    write_belief(&cfg.output_dir.join("belief.csv"), &rows)?;
    let summary = RunSummary::from_rows(&rows);
    let text = toml::to_string(&summary).map_err(CliError::output)?;
    fs::write(cfg.output_dir.join("summary.toml"), text).map_err(CliError::output)?;
    print_summary(&summary);
    match diverged {
        Some(msg) => Err(CliError::Diverged(format!("filter diverged: {msg}; partial log in {}", cfg.output_dir.display()))),
        None => Ok(summary),
    }
}

fn write_belief(path: &Path, rows: &[BeliefRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(CliError::output)?;
    for r in rows {
        w.serialize(r).map_err(CliError::output)?;
    }
    w.flush().map_err(CliError::output)
}

fn print_summary(s: &RunSummary) {
    println!("steps {}", s.steps);
    match s.convergence_step {
        Some(c) => println!("converged at step {c}"),
        None => println!("did not converge"),
    }
    println!("rms error {:.2} m (odometry {:.2} m)", s.rms_error_m, s.odom_rms_error_m);
    if s.convergence_step.is_some() {
        println!(
            "after convergence: rms {:.2} m, mean {:.2} m (odometry rms {:.2} m, mean {:.2} m)",
            s.post_rms_error_m, s.post_mean_error_m, s.post_odom_rms_error_m, s.post_odom_mean_error_m
        );
    }
}

pub struct BenchRow {
    pub metric: MetricKind,
    pub overlap: f64,
    pub series: ScoreSeries,
}

pub fn match_bench(scenario: &Path, map: Option<&Path>, out: &Path, seed: u64, random_poses: usize) -> Result<Vec<BenchRow>, CliError> {
    let record = load_scenario(scenario)?;
    let map = match map {
        Some(p) => load_map(p)?,
        None => record.reference_map.clone(),
    };
    let (flight, batches) = process(&record, seed)?;
    let posed = posed_orthos(&flight, &batches);
    let series = score_series_multi(&posed, &map, &MetricKind::ALL, random_poses, seed);
    let per_kind: Vec<(MetricKind, ScoreSeries)> = MetricKind::ALL.iter().copied().zip(series).collect();
    if let Some((k, s)) = per_kind.iter().find(|(_, s)| s.true_scores.len() < MIN_TRUE_SCORES || s.random_scores.is_empty()) {
        return Err(CliError::Data(format!(
            "{k}: {} true and {} random scores, need {MIN_TRUE_SCORES} and 1",
            s.true_scores.len(),
            s.random_scores.len()
        )));
    }
    let ranked = rank_metrics(&per_kind);
    if ranked.len() != per_kind.len() {
        return Err(CliError::Data("some kinds produced no comparable scores".into()));
    }
    let rows: Vec<BenchRow> = ranked
        .iter()
        .map(|(k, o)| BenchRow {
            metric: *k,
            overlap: *o,
            series: per_kind.iter().find(|p| p.0 == *k).map(|p| p.1.clone()).unwrap_or_default(),
        })
        .collect();

    fs::create_dir_all(out).map_err(CliError::output)?;
    let mut w = csv::Writer::from_path(out.join("overlap.csv")).map_err(CliError::output)?;
    w.write_record(["rank", "metric", "overlap", "true_mean", "random_mean", "n_true", "n_random"]).map_err(CliError::output)?;
    for (i, r) in rows.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.metric.to_string(),
            format!("{:.6}", r.overlap),
            format!("{:.6}", mean(r.series.true_scores.iter().copied())),
            format!("{:.6}", mean(r.series.random_scores.iter().copied())),
            r.series.true_scores.len().to_string(),
            r.series.random_scores.len().to_string(),
        ])
        .map_err(CliError::output)?;
    }
    w.flush().map_err(CliError::output)?;

    let mut w = csv::Writer::from_path(out.join("histograms.csv")).map_err(CliError::output)?;
    w.write_record(["metric", "bin", "low", "high", "true_density", "random_density"]).map_err(CliError::output)?;
    for r in &rows {
        let Ok(h) = PairedHistogram::build(&r.series.true_scores, &r.series.random_scores, DEFAULT_BINS) else {
            continue;
        };
        for i in 0..DEFAULT_BINS {
            let (lo, hi) = h.bin_edges(i);
            w.write_record([
                r.metric.to_string(),
                i.to_string(),
                format!("{lo:.6}"),
                format!("{hi:.6}"),
                format!("{:.6}", h.first[i]),
                format!("{:.6}", h.second[i]),
            ])
            .map_err(CliError::output)?;
        }
    }
    w.flush().map_err(CliError::output)?;

    println!("{:<8} {:>8}", "metric", "o_c");
    for r in &rows {
        println!("{:<8} {:>8.3}", r.metric, r.overlap);
    }
    Ok(rows)
}

pub struct HeatmapArgs<'a> {
    pub ortho: &'a Path,
    pub mask: Option<&'a Path>,
    pub map: &'a Path,
    pub metric: MetricKind,
    pub region: GridRegion,
    pub theta_deg: f64,
    pub scale: f64,
    pub out: &'a Path,
}

/// Writes the score surface as a PGM scaled so the best match is white.
pub fn render_heatmap(args: &HeatmapArgs) -> Result<(usize, usize, f64), CliError> {
    let ortho = OrthoImage::read_pair(args.ortho, args.mask, 0).map_err(|e| CliError::Config(format!("{}: {e}", args.ortho.display())))?;
    let map = load_map(args.map)?;
    let grid = score_grid(&ortho, &map, args.metric, &args.region, args.theta_deg.to_radians(), args.scale)
        .map_err(|e| CliError::Config(format!("region: {e}")))?;
    let best = grid.best(args.metric).ok_or_else(|| CliError::Data("no grid cell could be scored".into()))?;

    let finite = grid.values.iter().filter(|v| !v.is_nan());
    let lo = finite.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let data = grid
        .values
        .iter()
        .map(|v| {
            if v.is_nan() {
                INVALID
            } else if args.metric.higher_is_better() {
                ((v - lo) / span) as f32
            } else {
                ((hi - v) / span) as f32
            }
        })
        .collect();
    let image = GrayImage::from_vec(grid.width, grid.height, data).map_err(CliError::output)?;
    write_pgm(args.out, &image).map_err(CliError::output)?;
    let (x, y) = args.region.position(best.0, best.1);
    println!("{}x{} grid, best {} = {:.4} at ({x:.1}, {y:.1})", grid.width, grid.height, args.metric, best.2);
    Ok(best)
}
