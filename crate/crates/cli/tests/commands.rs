use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pgits::pipeline::{load_params, save_checkpoint, CHECKPOINT_FILE, LOG_FILE};
use pgits::model::ModelConfig;
use serde_json::Value;

fn pgits(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgits"))
        .args(args)
        .output()
        .expect("spawn pgits")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn code(o: &Output) -> Option<i32> {
    o.status.code()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MODEL: &str = "[model]\nlayers = 2\nfeature_dim = 8\n";
const TRAIN: &str = "[train]\nbatch_size = 4\nlr = 0.001\nmax_epochs = 2\n";

/// Simulated data spanning late May into June, so June hours form a test
/// split, plus a config pointing at it.
fn workspace(dir: &Path, start: &str, hours: usize, extra: &str) -> PathBuf {
    let sim = format!("seed = 3\n[simulate]\nn_stations = 12\nstart = \"{start}\"\n");
    let sim_cfg = dir.join("sim.toml");
    std::fs::write(&sim_cfg, sim).unwrap();
    let data = dir.join("data");
    let out = pgits(&["simulate", "--config", &s(&sim_cfg), "--hours", &hours.to_string(), "--out", &s(&data)]);
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        format!("seed = 3\n[data]\nstations = \"data/stations.csv\"\nobservations = \"data/observations.csv\"\n{extra}"),
    )
    .unwrap();
    cfg
}

#[test]
fn missing_config_exits_2() {
    let out = pgits(&["train", "--config", "/nonexistent/run.toml", "--out", "/tmp/never"]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("cannot read config"));
    assert!(out.stdout.is_empty());
}

#[test]
fn simulate_needs_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = pgits(&["simulate", "--out", &s(&dir.path().join("x"))]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("seed"));
}

#[test]
fn zero_hours_writes_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sim");
    let out = pgits(&["simulate", "--seed", "1", "--hours", "0", "--out", &s(&out_dir)]);
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    for f in ["observations.csv", "ground_truth.csv"] {
        let text = std::fs::read_to_string(out_dir.join(f)).unwrap();
        assert_eq!(text, "station_id,timestamp,pm25,wind_u,wind_v\n");
    }
}

#[test]
fn simulate_is_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let d = dir.path().join(name);
        let out = pgits(&["simulate", "--seed", "9", "--hours", "72", "--out", &s(&d)]);
        assert_eq!(code(&out), Some(0));
        let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(summary["hours"], 72);
        files.push(["observations.csv", "ground_truth.csv", "stations.csv"].map(|f| std::fs::read(d.join(f)).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    let other = dir.path().join("c");
    pgits(&["simulate", "--seed", "10", "--hours", "72", "--out", &s(&other)]);
    assert_ne!(std::fs::read(other.join("observations.csv")).unwrap(), files[0][0]);
}

#[test]
fn unstable_physics_exits_5_with_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\n[simulate]\ndiffusion_k = 5.0\ndt = 0.5\n").unwrap();
    let out = pgits(&["simulate", "--config", &s(&cfg), "--hours", "5", "--out", &s(&dir.path().join("o"))]);
    assert_eq!(code(&out), Some(5));
    assert!(stderr(&out).contains("must be below 0.0"), "{}", stderr(&out));
}

#[test]
fn closed_run_conserves_mass_column_by_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 2\n[simulate]\nemission = 0.0\ndecay = 0.0\nnoise_std = 0.0\n").unwrap();
    let out_dir = dir.path().join("o");
    let out = pgits(&["simulate", "--config", &s(&cfg), "--hours", "200", "--out", &s(&out_dir)]);
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(out_dir.join("ground_truth.csv")).unwrap();
    let mut mass: Vec<(String, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v: f64 = rec[2].parse().unwrap();
        match mass.last_mut() {
            Some((ts, m)) if ts == &rec[1] => *m += v,
            _ => mass.push((rec[1].to_string(), v)),
        }
    }
    assert_eq!(mass.len(), 200);
    let m0 = mass[0].1;
    for (ts, m) in &mass {
        assert!((m - m0).abs() <= 1e-4 * m0, "{ts}: {m} vs {m0}");
    }
}

#[test]
fn train_then_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "2014-05-20T00:00:00", 600, &format!("{MODEL}{TRAIN}"));
    let run = dir.path().join("run");
    let out = pgits(&["train", "--config", &s(&cfg), "--out", &s(&run)]);
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["epochs"], 2);
    assert_eq!(summary["training_graph_nodes"], summary["inference_graph_nodes"]);

    let log = std::fs::read_to_string(run.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "train_loss", "sup_loss", "phy_loss", "val_mae", "mu"] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
    }

    let ckpt = run.join(CHECKPOINT_FILE);
    let model = ModelConfig {
        layers: 2,
        feature_dim: 8,
        ..ModelConfig::default()
    };
    let params = load_params(&ckpt, model).unwrap();
    let again = dir.path().join("again.bin");
    save_checkpoint(&again, &params).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    let report_dir = dir.path().join("report");
    let out = pgits(&[
        "evaluate",
        "--config",
        &s(&cfg),
        "--checkpoint",
        &s(&ckpt),
        "--out",
        &s(&report_dir),
    ]);
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let best = summary["best_val_mae"].as_f64().unwrap();
    let val = report["val_mae"].as_f64().unwrap();
    assert!((best - val).abs() <= 1e-6, "{best} vs {val}");
    assert!(report["knn"]["mae"].as_f64().is_some());
    assert_eq!(report["knn_k"], 5);
    assert!(report["model"]["mae"].as_f64().unwrap().is_finite());
    assert!(report["reference"].as_array().unwrap().iter().any(|r| r["method"] == "PGITS"));
    for f in ["report.json", "per_node.csv", "plot.csv"] {
        assert!(report_dir.join(f).is_file(), "{f}");
    }

    let preds = dir.path().join("pred.csv");
    let out = pgits(&["infer", "--config", &s(&cfg), "--checkpoint", &s(&ckpt), "--out", &s(&preds)]);
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(&preds).unwrap();
    assert_eq!(text.lines().next(), Some("station_id,timestamp,pm25_est,observed"));
    assert_eq!(text.lines().count(), 1 + 12 * 600);

    let wide = dir.path().join("wide.toml");
    let cfg_text = std::fs::read_to_string(&cfg).unwrap().replace("feature_dim = 8", "feature_dim = 16");
    std::fs::write(&wide, cfg_text).unwrap();
    let out = pgits(&["evaluate", "--config", &s(&wide), "--checkpoint", &s(&ckpt)]);
    assert_eq!(code(&out), Some(4), "{}", stderr(&out));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "2014-05-01T00:00:00", 300, &format!("{MODEL}{TRAIN}"));
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = pgits(&["train", "--config", &s(&cfg), "--out", &s(&run)]);
        assert_eq!(code(&out), Some(0), "{}", stderr(&out));
        runs.push([CHECKPOINT_FILE, LOG_FILE].map(|f| std::fs::read(run.join(f)).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn empty_test_split_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "2014-05-01T00:00:00", 300, "");
    let out = pgits(&["evaluate", "--config", &s(&cfg)]);
    assert_eq!(code(&out), Some(6), "{}", stderr(&out));
    assert!(stderr(&out).contains("test split is empty"));
}

#[test]
fn baselines_only_evaluation_lists_knn() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "2014-05-25T00:00:00", 400, "");
    let out = pgits(&["evaluate", "--config", &s(&cfg), "--k", "3"]);
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["model"].is_null());
    assert_eq!(report["knn_k"], 3);
    assert!(report["knn"]["mae"].as_f64().unwrap() > 0.0);
    assert!(report["observed_mean"]["mae"].as_f64().unwrap() > 0.0);
}

#[test]
fn gradcheck_command_passes() {
    let out = pgits(&["gradcheck", "--seed", "2"]);
    assert_eq!(code(&out), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("max relative error"));
}

#[test]
fn bad_override_is_a_config_error() {
    let out = pgits(&["simulate", "--seed", "1", "--alpha", "1.5", "--out", "/tmp/never"]);
    assert_eq!(code(&out), Some(2));
}
