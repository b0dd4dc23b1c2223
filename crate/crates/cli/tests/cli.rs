use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[data]
dir = "data"

[data.split.train]
start = "1989-01-01"
end = "1990-12-31"
[data.split.val]
start = "1991-01-01"
end = "1991-12-31"
[data.split.test]
start = "1992-01-01"
end = "1992-12-31"

[model]
variants = ["STL", "HCMTL"]
hidden = 4

[train]
epochs = 1
batch_size = 16
seeds = [0, 1]

[segment]
window = 90
stride = 45

[synth]
n_basins = 2
n_days = 1461
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade-mtl"))
        .current_dir(dir)
        .env("CASCADE_MTL_RUN_DIR", "runs")
        .env("RUST_LOG", "warn")
        .args(args)
        .args(["--config", "run.toml", "--jobs", "1"])
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_dir(dir: &Path) -> PathBuf {
    let mut runs: Vec<_> = fs::read_dir(dir.join("runs"))
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .collect();
    assert_eq!(runs.len(), 1);
    runs.pop().unwrap()
}

#[test]
fn synth_writes_dataset() {
    let dir = workspace();
    ok(dir.path(), &["synth"]);
    let data = dir.path().join("data");
    assert!(data.join("attributes.csv").is_file());
    assert_eq!(fs::read_dir(data.join("timeseries")).unwrap().count(), 2);
}

#[test]
fn zero_basins_is_a_config_error() {
    let dir = workspace();
    let out = run(dir.path(), &["synth", "--set", "synth.n_basins=0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_usage_code() {
    let dir = workspace();
    let out = run(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data"));
}

#[test]
fn unknown_key_exits_with_usage_code() {
    let dir = workspace();
    let out = run(dir.path(), &["synth", "--set", "train.learning_rate=0.1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval() {
    let dir = workspace();
    ok(dir.path(), &["synth"]);
    ok(dir.path(), &["train"]);
    let run = run_dir(dir.path());
    assert!(fs::read_to_string(run.join("config.toml"))
        .unwrap()
        .contains("hidden = 4"));
    for v in ["STL", "HCMTL"] {
        assert!(run.join(v).join("member_0.json").is_file());
        assert!(run.join(v).join("member_1.json").is_file());
        assert_eq!(
            fs::read_to_string(run.join(v).join("run_log.jsonl"))
                .unwrap()
                .lines()
                .count(),
            2
        );
    }

    let stdout = ok(dir.path(), &["eval"]);
    assert!(stdout.contains("HCMTL"));
    let eval = run.join("HCMTL").join("eval");
    for f in [
        "report.json",
        "basins.csv",
        "ecdf.csv",
        "predictions/synth_000.csv",
    ] {
        assert!(eval.join(f).is_file(), "{f}");
    }
    assert!(run.join("comparison.json").is_file());
    let first = fs::read(eval.join("report.json")).unwrap();
    ok(dir.path(), &["eval"]);
    assert_eq!(fs::read(eval.join("report.json")).unwrap(), first);

    // A tampered checkpoint no longer matches the configuration.
    let ck = run.join("STL").join("member_1.json");
    let text = fs::read_to_string(&ck).unwrap();
    let hash = run.file_name().unwrap().to_str().unwrap();
    fs::write(&ck, text.replacen(hash, "0000000000000000", 1)).unwrap();
    assert_eq!(self::run(dir.path(), &["eval"]).status.code(), Some(2));

    fs::remove_file(&ck).unwrap();
    assert_eq!(self::run(dir.path(), &["eval"]).status.code(), Some(2));
}

#[test]
fn overrides_and_seed_offset_change_the_run_id() {
    let dir = workspace();
    ok(dir.path(), &["synth"]);
    ok(dir.path(), &["train", "--set", "model.variants=[\"STL\"]"]);
    ok(
        dir.path(),
        &[
            "train",
            "--set",
            "model.variants=[\"STL\"]",
            "--seed-offset",
            "5",
        ],
    );
    assert_eq!(fs::read_dir(dir.path().join("runs")).unwrap().count(), 2);
}

#[test]
fn eval_before_train_is_a_usage_error() {
    let dir = workspace();
    ok(dir.path(), &["synth"]);
    assert_eq!(run(dir.path(), &["eval"]).status.code(), Some(2));
}

#[test]
fn unknown_axis_is_a_usage_error() {
    let dir = workspace();
    ok(dir.path(), &["synth"]);
    assert_eq!(
        run(dir.path(), &["ablate", "--axis", "depth"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(dir.path(), &["ablate"]).status.code(), Some(2));
}

#[test]
fn noise_grid_has_six_cells() {
    let dir = workspace();
    ok(dir.path(), &["synth"]);
    ok(
        dir.path(),
        &[
            "ablate",
            "--axis",
            "noise",
            "--set",
            "model.variants=[\"STL\"]",
            "--set",
            "train.seeds=[0]",
        ],
    );
    let grids: Vec<_> = fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .flatten()
        .map(|e| e.path().join("ablate_noise").join("grid.json"))
        .filter(|p| p.is_file())
        .collect();
    assert_eq!(grids.len(), 1);
    let grid: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&grids[0]).unwrap()).unwrap();
    let cells = grid["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 6);
    assert!(cells.iter().all(|c| c["error"].is_null()));
}
