use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ortholoc::io::{read_georaster, read_pgm};
use ortholoc::ortho::{OrthoImage, ORTHO_SIZE};
use ortholoc::raster::{GrayImage, INVALID};
use ortholoc::sim::{Appearance, ImuNoise, ScenarioConfig};
use tempfile::TempDir;

fn ortholoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ortholoc")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 1.5 km over a 1.6 km map, enough for a dozen batches whose orthos stay
/// on the map.
fn small_config(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        map_size_px: 1600,
        trajectory_waypoints: vec![[350.0, 350.0], [1250.0, 400.0], [1200.0, 1050.0]],
        ..Default::default()
    }
}

fn simulate(dir: &Path, cfg: &ScenarioConfig) {
    let config = dir.join("scenario.toml");
    fs::write(&config, cfg.to_toml()).unwrap();
    let scenario = dir.join("scenario");
    let out = ortholoc(&["simulate", "--config", path(&config), "--out", path(&scenario)]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
}

/// A simulated scenario and a ZNCC model fitted on it, shared by the tests.
struct Shared {
    dir: PathBuf,
}

impl Shared {
    fn scenario(&self) -> PathBuf {
        self.dir.join("scenario")
    }

    fn model(&self) -> PathBuf {
        self.dir.join("model.toml")
    }
}

fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-shared");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        simulate(&dir, &small_config(8));
        let s = Shared { dir };
        let out = ortholoc(&["calibrate", "--scenario", path(&s.scenario()), "--out", path(&s.model()), "--random-poses", "300"]);
        assert_eq!(code(&out), 0, "{}", text(&out.stderr));
        s
    })
}

#[test]
fn simulate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    simulate(&a, &small_config(3));
    simulate(&b, &small_config(3));
    for name in ["config.toml", "map.pgm", "map.geo", "truth.csv", "tracks.csv", "imu.csv", "frame_000000.pgm"] {
        let (x, y) = (a.join("scenario").join(name), b.join("scenario").join(name));
        assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap(), "{name}");
    }
}

#[test]
fn bad_config_names_the_key() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "altitude_m = -5.0\n").unwrap();
    let out = ortholoc(&["simulate", "--config", path(&config), "--out", path(&tmp.path().join("s"))]);
    assert_eq!(code(&out), 2);
    assert!(text(&out.stderr).contains("altitude"), "{}", text(&out.stderr));
}

#[test]
fn calibrate_separates_true_poses() {
    let s = shared();
    assert!(s.model().exists());
    let out = ortholoc(&["calibrate", "--scenario", path(&s.scenario()), "--out", path(&s.dir.join("again.toml")), "--random-poses", "300"]);
    assert_eq!(code(&out), 0);
    let stdout = text(&out.stdout);
    let after = stdout.split("mean posterior true ").nth(1).expect(&stdout);
    let value: f64 = after.split(',').next().unwrap().trim().parse().unwrap();
    assert!(value > 0.5, "{stdout}");
}

#[test]
fn calibrate_rejects_broken_scenario() {
    let tmp = TempDir::new().unwrap();
    let scenario = tmp.path().join("broken");
    fs::create_dir_all(&scenario).unwrap();
    fs::write(scenario.join("config.toml"), small_config(1).to_toml()).unwrap();
    let out = ortholoc(&["calibrate", "--scenario", path(&scenario), "--out", path(&tmp.path().join("m.toml"))]);
    assert_eq!(code(&out), 3, "{}", text(&out.stderr));
}

#[test]
fn match_bench_ranks_all_metrics() {
    let s = shared();
    let out_dir = s.dir.join("bench");
    let out = ortholoc(&["match-bench", "--scenario", path(&s.scenario()), "--out", path(&out_dir), "--random-poses", "200"]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let mut r = csv::Reader::from_path(out_dir.join("overlap.csv")).unwrap();
    let overlaps: Vec<f64> = r.records().map(|rec| rec.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(overlaps.len(), 12);
    assert!(overlaps.iter().all(|o| (0.0..=1.0).contains(o)));
    assert!(overlaps.windows(2).all(|w| w[0] <= w[1]));
    let hist = fs::read_to_string(out_dir.join("histograms.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 12 * 30);
}

#[test]
fn heatmap_peaks_at_the_cut_position() {
    let s = shared();
    let map_path = s.scenario().join("map.pgm");
    let map = read_georaster(&map_path).unwrap();
    let (x0, y0) = (800.0, 750.0);
    let mut pixels = GrayImage::filled(ORTHO_SIZE, ORTHO_SIZE, INVALID);
    let mut mask = vec![false; ORTHO_SIZE * ORTHO_SIZE];
    for row in 0..ORTHO_SIZE {
        for col in 0..ORTHO_SIZE {
            let (qx, qy) = OrthoImage::grid_to_local(col as f64, row as f64);
            if qx.hypot(qy) < 180.0 {
                pixels.set(col, row, map.sample_world(x0 + qx, y0 + qy).unwrap());
                mask[row * ORTHO_SIZE + col] = true;
            }
        }
    }
    let ortho = OrthoImage {
        pixels,
        mask,
        center_frame: 0,
        camera_height_above_plane: 92.0,
    };
    let tmp = TempDir::new().unwrap();
    ortho.write_pair(tmp.path()).unwrap();
    let heat = tmp.path().join("heat.pgm");
    let out = ortholoc(&[
        "render-heatmap",
        "--ortho",
        path(&tmp.path().join("ortho_000000.pgm")),
        "--mask",
        path(&tmp.path().join("mask_000000.pgm")),
        "--map",
        path(&map_path),
        "--region",
        "780,730,820,770",
        "--step",
        "4",
        "--out",
        path(&heat),
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("at (800.0, 750.0)"), "{}", text(&out.stdout));
    let img = read_pgm(&heat).unwrap();
    assert_eq!((img.width, img.height), (11, 11));
    assert!((img.get(5, 5) - 1.0).abs() < 1e-3);

    let out = ortholoc(&["render-heatmap", "--ortho", path(&tmp.path().join("ortho_000000.pgm")), "--map", path(&map_path), "--region", "-900,0,-800,100", "--out", path(&heat)]);
    assert_eq!(code(&out), 2);
}

fn run_config(dir: &Path, s: &Shared, extra: &str) -> PathBuf {
    let cfg = dir.join("run.toml");
    let body = format!(
        "scenario_dir = {:?}\nmodel_path = {:?}\noutput_dir = {:?}\n{extra}",
        s.scenario(),
        s.model(),
        dir.join("out")
    );
    fs::write(&cfg, body).unwrap();
    cfg
}

#[test]
fn localize_rejects_metric_mismatch() {
    let s = shared();
    let tmp = TempDir::new().unwrap();
    let cfg = run_config(tmp.path(), s, "metric = \"SSD\"\n");
    let out = ortholoc(&["localize", "--config", path(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(text(&out.stderr).contains("metric"));
}

#[test]
fn localize_reports_divergence() {
    let s = shared();
    let tmp = TempDir::new().unwrap();
    let cfg = run_config(tmp.path(), s, "init_center = [-20000.0, -20000.0]\nP = 50\n");
    let out = ortholoc(&["localize", "--config", path(&cfg)]);
    assert_eq!(code(&out), 4, "{}", text(&out.stderr));
    assert!(tmp.path().join("out/belief.csv").exists());
}

#[test]
fn localize_tracks_with_perfect_start() {
    let tmp = TempDir::new().unwrap();
    let cfg = ScenarioConfig {
        imu: ImuNoise::zero(),
        appearance: Appearance::identity(),
        ..small_config(4)
    };
    simulate(tmp.path(), &cfg);
    let scenario = tmp.path().join("scenario");
    let model = tmp.path().join("model.toml");
    let out = ortholoc(&["calibrate", "--scenario", path(&scenario), "--out", path(&model), "--random-poses", "300"]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let out_dir = tmp.path().join("run");
    let out = ortholoc(&[
        "localize",
        "--scenario",
        path(&scenario),
        "--model",
        path(&model),
        "--init-mode",
        "accurate",
        "--seed",
        "2",
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let mut r = csv::Reader::from_path(out_dir.join("belief.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "error_m").unwrap();
    let errors: Vec<f64> = r.records().map(|rec| rec.unwrap()[col].parse().unwrap()).collect();
    assert!(errors.len() >= 10);
    assert!(*errors.last().unwrap() < 5.0, "{errors:?}");
    let summary = fs::read_to_string(out_dir.join("summary.toml")).unwrap();
    assert!(summary.contains("rms_error_m"));
}
