//! Drives the `turbmend` binary end to end on tiny inputs.

use std::path::Path;
use std::process::{Command, Output};

use turbmend::imageio::write_png16;
use turbmend::scene::skyline;

fn turbmend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_turbmend")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_restore_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.png");
    write_png16(&truth, &skyline(40, 32, 1)).unwrap();
    let seq = dir.path().join("seq");
    let o = turbmend(&["simulate", s(&truth), "--preset", "weak", "--frames", "4", "--seed", "3", "--out", s(&seq), "--fields"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(seq.join("frame_0003.png").exists());
    assert!(seq.join("fields").is_dir());
    let manifest = std::fs::read_to_string(seq.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=3"), "{manifest}");

    let out = dir.path().join("out");
    let o = turbmend(&[
        "restore", s(&seq), "--out", s(&out), "--set", "middle_loop=1", "--set", "inner_loop=2", "--set", "deconv=off",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["reference.png", "enhanced_reference.png", "fused_Z.png", "restored_L.png", "k_star.u16", "config_used.txt"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let log = std::fs::read_to_string(out.join("run_log.jsonl")).unwrap();
    let stages: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(stages, ["rpca", "enhance", "fuse", "deconv"]);

    let o = turbmend(&["evaluate", s(&out.join("restored_L.png")), s(&truth)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("name,psnr,ssim"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 3);
    assert!(row[1].parse::<f64>().unwrap() > 10.0);
}

#[test]
fn bench_prints_summary() {
    let o = turbmend(&["--threads", "1", "bench", "--size", "16", "--trials", "1", "--iterations", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ratio="));
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = turbmend(&["restore", s(&dir.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "no_such_key=1\n").unwrap();
    let o = turbmend(&["restore", s(dir.path()), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let o = turbmend(&["simulate", s(&cfg), "--preset", "hurricane"]);
    assert_eq!(o.status.code(), Some(2));
}
