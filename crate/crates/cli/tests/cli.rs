use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn magslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magslam")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_slam_predict_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.ini");
    fs::write(&cfg, "[scenario]\nseed = 4\n").unwrap();
    let data = dir.path().join("data");
    let out = magslam(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["imu.csv", "mag.csv", "truth.csv", "manifest.ini"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let sol = dir.path().join("solution");
    let out = magslam(&[
        "slam",
        "--imu",
        s(&data.join("imu.csv")),
        "--mag",
        s(&data.join("mag.csv")),
        "--truth",
        s(&data.join("truth.csv")),
        "--config",
        s(&data.join("manifest.ini")),
        "--out",
        s(&sol),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("matched 17") && stdout.contains("before:") && stdout.contains("after:"), "{stdout}");
    for f in ["trajectory.csv", "cost.csv", "bias.csv", "map_train.csv", "solution.ini", "trajectory.svg", "cost_trace.svg"] {
        assert!(sol.join(f).exists(), "{f}");
    }

    let grid = dir.path().join("grid.csv");
    let out = magslam(&["predict-map", "--solution", s(&sol), "--grid", "0:0.5:3,0:0.5:2", "--out", s(&grid)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&grid).unwrap().lines().count(), 7);

    let out = magslam(&["eval", "--est", s(&sol.join("trajectory.csv")), "--truth", s(&data.join("truth.csv"))]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("rmse,max_error"));
    let vals: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(vals[0] < 0.066 && vals[0] <= vals[1], "{vals:?}");

    let out = magslam(&["eval", "--est", s(&data.join("truth.csv")), "--truth", s(&data.join("truth.csv"))]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "rmse,max_error\n0,0\n");
}

#[test]
fn study_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.ini");
    fs::write(&cfg, "[study]\nkind = wrong_sigma_f\nvalues = 1\nseeds = 2\n").unwrap();
    let out = magslam(&["study", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("Before SLAM") && stdout.contains("After SLAM"), "{stdout}");
    assert_eq!(fs::read_to_string(dir.path().join("results.csv")).unwrap().lines().count(), 3);
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&magslam(&["frobnicate"])), 1);
    assert_eq!(code(&magslam(&["eval", "--est", "/nonexistent.csv", "--truth", "/nonexistent.csv"])), 1);

    let bad = dir.path().join("bad.ini");
    fs::write(&bad, "[scenario]\nshape = hexagon\n").unwrap();
    let out = magslam(&["simulate", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hexagon"));

    let garbled = dir.path().join("garbled.csv");
    fs::write(&garbled, "t,px,py\n0,0,zero\n").unwrap();
    let out = magslam(&["eval", "--est", s(&garbled), "--truth", s(&garbled)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn help_exits_with_zero() {
    let out = magslam(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout).unwrap().contains("predict-map"));
}
