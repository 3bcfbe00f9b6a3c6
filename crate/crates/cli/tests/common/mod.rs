//! Small-grid fixture shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fdia::grid::DEFAULT_GRID_TOML;

pub const BIN: &str = env!("CARGO_BIN_EXE_fdia");

/// Writes a 60-step grid and a configuration sized for quick runs into `dir`.
pub fn small_config(dir: &Path) -> PathBuf {
    let grid = DEFAULT_GRID_TOML.replace("t_f = 5.0", "t_f = 0.6");
    assert_ne!(grid, DEFAULT_GRID_TOML, "fixture expects the shipped horizon");
    std::fs::write(dir.join("grid.toml"), grid).unwrap();
    let cfg = "seed = 11
grid = \"grid.toml\"
[predictor]
hidden = 8
episodes = 10
epochs = 2
[offline]
episodes = 6
hidden = [16]
epochs = 3
[train]
train_batch = 120
fragment_length = 60
epochs = 2
hidden = [16]
[train.ppo]
minibatch = 64
[eval]
episodes = 4
episodes_per_bus = 2
";
    let path = dir.join("fdia.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

pub fn fdia(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

/// Runs and panics with stderr on failure.
pub fn fdia_ok(args: &[&str]) -> Output {
    let out = fdia(args);
    assert!(out.status.success(), "fdia {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// `(file name, sha256)` of every artifact in a manifest.
pub fn artifact_hashes(path: &Path) -> Vec<(String, String)> {
    manifest(path)["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            let p = PathBuf::from(a["path"].as_str().unwrap());
            assert!(p.exists(), "artifact {} missing", p.display());
            (p.file_name().unwrap().to_string_lossy().into_owned(), a["sha256"].as_str().unwrap().to_string())
        })
        .collect()
}

/// Every subcommand on the small config under `out`, single-threaded.
/// Returns the artifact hashes of all manifests in order.
pub fn full_pipeline(config: &Path, out: &Path) -> Vec<(String, String)> {
    let c = config.to_str().unwrap();
    let o = |s: &str| out.join(s).to_string_lossy().into_owned();
    let base = ["--config", c, "--threads", "1", "-q"];
    let run = |rest: &[&str]| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(rest);
        fdia_ok(&args);
    };
    let (pred, data, clf) = (o("pred.json"), o("data.csv"), o("clf.json"));
    let (marl, tf, ev, ti) = (o("marl"), o("tf"), o("ev"), o("ti"));
    run(&["train-predictor", "--out", &pred]);
    run(&["gen-offline-data", "--predictor", &pred, "--out", &data]);
    run(&["train-offline", "--dataset", &data, "--out", &clf]);
    run(&["train-marl", "--predictor", &pred, "--out-dir", &marl]);
    run(&["train-marl", "--predictor", &pred, "--out-dir", &tf, "--warm-start", &clf]);
    let (ma, md) = (format!("{marl}/marl_a.json"), format!("{marl}/marl_d.json"));
    run(&["evaluate", "--predictor", &pred, "--defender", &md, "--attacker", &ma, "--out-dir", &ev, "--traces"]);
    run(&["evaluate", "--predictor", &pred, "--offline", &clf, "--time-invariant", "--out-dir", &ti]);
    let mut all = Vec::new();
    for m in [
        format!("{pred}.manifest.json"),
        format!("{data}.manifest.json"),
        format!("{clf}.manifest.json"),
        format!("{marl}/manifest.json"),
        format!("{tf}/manifest.json"),
        format!("{ev}/manifest.json"),
        format!("{ti}/manifest.json"),
    ] {
        all.extend(artifact_hashes(Path::new(&m)));
    }
    all
}
