use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn grainsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grainsim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = grainsim(dir, args);
    assert_eq!(code(&out), 0, "grainsim {args:?} failed: {}", stderr(&out));
    out
}

const GENERATE: &[&str] = &[
    "generate",
    "--dims",
    "32,32",
    "--num-trajectories",
    "2",
    "--num-frames",
    "8",
    "--sweeps-per-frame",
    "2",
    "--warmup-sweeps",
    "4",
    "--data-dir",
    "data",
];

const TRAIN: &[&str] = &[
    "train",
    "--data-dir",
    "data",
    "--ratio",
    "2",
    "--hidden",
    "6",
    "--layers",
    "2",
    "--horizon",
    "2",
    "--batch-size",
    "3",
    "--val-fraction",
    "0.5",
];

fn dataset() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), GENERATE);
    dir
}

fn with(base: &[&str], extra: &[&'static str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run_owned(dir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(dir, &refs)
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn generate_writes_containers_and_manifest() {
    let dir = dataset();
    let data = dir.path().join("data");
    assert_eq!(files(&data.join("raw")).len(), 2);
    assert_eq!(files(&data.join("fields")).len(), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["coarsen"]["downsample"], 4);
    assert_eq!(manifest["coarsen"]["gaussian_sigma"], 1.0);
    assert_eq!(manifest["coarsen"]["temporal_window"], 3);
    assert_eq!(manifest["config"]["num_trajectories"], 2);
    assert_eq!(manifest["trajectories"][1]["seed"], 1);
    assert_eq!(manifest["field_dims"], serde_json::json!([8, 8]));

    // identical config, identical bytes
    let first: Vec<Vec<u8>> = files(&data.join("fields")).iter().map(|p| std::fs::read(p).unwrap()).collect();
    ok(dir.path(), GENERATE);
    let second: Vec<Vec<u8>> = files(&data.join("fields")).iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn postprocess_rebuilds_fields_from_raw() {
    let dir = dataset();
    let fields = dir.path().join("data/fields/traj_0000.ggt");
    let before = std::fs::read(&fields).unwrap();
    ok(dir.path(), &["postprocess", "--data-dir", "data", "--gaussian-sigma", "0.5"]);
    assert_ne!(std::fs::read(&fields).unwrap(), before);
    ok(dir.path(), &["postprocess", "--data-dir", "data"]);
    assert_eq!(std::fs::read(&fields).unwrap(), before);
}

#[test]
fn interrupted_training_resumes_to_the_same_history() {
    let dir = dataset();
    let full = with(TRAIN, &["--epochs", "4", "--out-dir", "full"]);
    run_owned(dir.path(), &full);

    let part = with(TRAIN, &["--epochs", "4", "--out-dir", "part", "--stop-after", "2"]);
    run_owned(dir.path(), &part);
    let partial = std::fs::read_to_string(dir.path().join("part/loss.csv")).unwrap();
    assert_eq!(partial.lines().count(), 1 + 3);
    let resumed = with(TRAIN, &["--epochs", "4", "--out-dir", "part", "--resume"]);
    let out = run_owned(dir.path(), &resumed);
    assert!(stderr(&out).contains("resuming after epoch 2"));

    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("full", "loss.csv"), read("part", "loss.csv"));
    assert_eq!(read("full", "checkpoint.ggck"), read("part", "checkpoint.ggck"));
    assert_eq!(read("full", "train_state.ggrs"), read("part", "train_state.ggrs"));
}

#[test]
fn resume_rejects_changed_configuration() {
    let dir = dataset();
    run_owned(dir.path(), &with(TRAIN, &["--epochs", "2", "--out-dir", "o", "--stop-after", "1"]));
    let out = grainsim(
        dir.path(),
        &with(TRAIN, &["--epochs", "2", "--out-dir", "o", "--resume", "--learning-rate", "0.5"])
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn training_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = grainsim(dir.path(), &["train", "--data-dir", "missing"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("manifest.json"), "{}", stderr(&out));

    ok(dir.path(), GENERATE);
    // 8 frames cannot feed an 8-step window; refused before any epoch runs
    let out = grainsim(dir.path(), &["train", "--data-dir", "data", "--horizon", "8", "--out-dir", "o"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(!stderr(&out).contains("epoch"));
    assert!(!dir.path().join("o/loss.csv").exists());
}

fn trained() -> TempDir {
    let dir = dataset();
    run_owned(dir.path(), &with(TRAIN, &["--epochs", "1", "--out-dir", "o"]));
    dir
}

#[test]
fn infer_writes_prediction_metrics_and_parity() {
    let dir = trained();
    let out = ok(
        dir.path(),
        &[
            "infer",
            "--out-dir",
            "o",
            "--input",
            "data/fields/traj_0000.ggt",
            "--reference",
            "data/fields/traj_0000.ggt",
            // beyond the 8 stored frames
            "--steps",
            "30",
            "--verify-parity",
        ],
    );
    let line = stdout(&out);
    let d: f64 = line.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(d <= 1e-4, "{line}");

    let metrics = std::fs::read_to_string(dir.path().join("o/predicted.metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,max_abs,step_seconds,rmse,peak_elements"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 31);
    assert!(rows[0].starts_with("0,"));
    assert!(rows[30].contains("NaN"), "no reference frame at step 30");
    let info: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/predicted.json")).unwrap()).unwrap();
    assert_eq!(info["encode_calls"], 1);
    assert_eq!(info["config"]["steps"], 30);
    assert!(info["parity_max_discrepancy"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn infer_latent_calls_and_errors() {
    let dir = trained();
    let base = ["infer", "--out-dir", "o", "--input", "data/fields/traj_0001.ggt", "--steps", "25"];
    ok(dir.path(), &[&base[..], &["--emit-every", "25"]].concat());
    let info: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/predicted.json")).unwrap()).unwrap();
    assert_eq!((info["encode_calls"].as_u64(), info["decode_calls"].as_u64()), (Some(1), Some(1)));
    assert_eq!(info["recorded"], 2);

    let out = grainsim(dir.path(), &[&base[..], &["--checkpoint", "nope.ggck"]].concat());
    assert_eq!(code(&out), 2);

    // divergence is a warning unless --strict
    let tiny = [&base[..], &["--divergence-threshold", "1e-9"]].concat();
    let out = grainsim(dir.path(), &tiny);
    assert_eq!(code(&out), 0);
    assert!(stderr(&out).contains("diverged at step 0"), "{}", stderr(&out));
    let out = grainsim(dir.path(), &[&tiny[..], &["--strict"]].concat());
    assert_eq!(code(&out), 3);
    assert!(dir.path().join("o/predicted.ggt").exists());

    let out = grainsim(dir.path(), &[&base[..], &["--algorithm", "gnn_only"]].concat());
    assert_eq!(code(&out), 1, "compressed checkpoint cannot run GNN-only");
}

#[test]
fn stats_reports_and_errors() {
    let dir = trained();
    ok(dir.path(), &["infer", "--out-dir", "o", "--input", "data/fields/traj_0000.ggt", "--steps", "7"]);
    ok(dir.path(), &["stats", "--data-dir", "data", "--out-dir", "s", "--predicted", "o/predicted.ggt", "--plots"]);
    let ks = std::fs::read_to_string(dir.path().join("s/stats_ks.csv")).unwrap();
    assert_eq!(ks.lines().next(), Some("frame,truth_frame,ks"));
    assert_eq!(ks.lines().count(), 1 + 8);
    let hist = std::fs::read_to_string(dir.path().join("s/stats_histogram.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("bin_left,bin_right,density,source"));
    assert_eq!(hist.lines().count(), 1 + 2 * 20);
    let svg = std::fs::read_to_string(dir.path().join("s/stats.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("predicted"));

    // one predicted trajectory: envelope collapses onto its mean
    let frames = std::fs::read_to_string(dir.path().join("s/stats_frames.csv")).unwrap();
    for row in frames.lines().filter(|l| l.starts_with("predicted,")) {
        let v: Vec<&str> = row.split(',').collect();
        assert_eq!(v[2], v[3]);
        assert_eq!(v[2], v[4]);
    }

    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let out = grainsim(dir.path(), &["stats", "--truth", "empty", "--out-dir", "s"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no .ggt"), "{}", stderr(&out));
}

#[test]
fn bench_table_follows_the_n_d_law() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["bench", "--out-dir", "b", "--bench-meshes", "32,64", "--bench-ratios", "1,2,4", "--bench-steps", "2", "--hidden", "4"],
    );
    let rows = std::fs::read_to_string(dir.path().join("b/bench_rows.csv")).unwrap();
    let nodes = |mesh: &str, ratio: &str, alg: &str| -> usize {
        rows.lines()
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|v| v[0] == mesh && v[1] == ratio && v[2] == alg)
            .map(|v| v[3].parse().unwrap())
            .unwrap()
    };
    assert_eq!(nodes("64", "1", "gnn_only"), 16 * nodes("64", "4", "ae_latent"));
    assert_eq!(nodes("64", "1", "gnn_only"), 4 * nodes("64", "2", "ae_original"));

    let table = std::fs::read_to_string(dir.path().join("b/bench_table.csv")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    assert_eq!(
        header,
        [
            "mesh",
            "gnn_only_elements",
            "gnn_only_seconds",
            "ae_original_n2_elements",
            "ae_original_n2_seconds",
            "ae_latent_n2_elements",
            "ae_latent_n2_seconds",
            "ae_original_n4_elements",
            "ae_original_n4_seconds",
            "ae_latent_n4_elements",
            "ae_latent_n4_seconds",
        ]
    );
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&grainsim(dir.path(), &["train", "--no-such-flag", "1"])), 1);
    assert_eq!(code(&grainsim(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&grainsim(dir.path(), &["train", "--epochs", "many"])), 1);
    std::fs::write(dir.path().join("c.toml"), "epoch = 3\n").unwrap();
    let out = grainsim(dir.path(), &["train", "--config", "c.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unknown key"), "{}", stderr(&out));
    assert_eq!(code(&grainsim(dir.path(), &["--help"])), 0);
    assert!(stdout(&grainsim(dir.path(), &["train", "--help"])).contains("--learning-rate"));
}

#[test]
fn config_file_values_reach_the_command() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("gen.toml"),
        "dims = [16, 16]\nnum_trajectories = 1\nnum_frames = 3\nsweeps_per_frame = 1\nwarmup_sweeps = 0\ndata_dir = \"d\"\n",
    )
    .unwrap();
    ok(dir.path(), &["generate", "--config", "gen.toml", "--num-frames", "4"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mc"]["dims"], serde_json::json!([16, 16]));
    assert_eq!(manifest["mc"]["num_frames"], 4);
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["verify"]);
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 9, "{text}");
    assert!(!text.contains("FAIL"));
}

/// The analytic element count tracks the measured heap peak of a step
/// within a constant factor on every mesh.
#[cfg(feature = "alloc-stats")]
#[test]
fn analytic_peak_tracks_measured_heap() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["bench", "--out-dir", "b", "--bench-meshes", "32,64,128", "--bench-ratios", "1,4", "--bench-steps", "2"]);
    let rows = std::fs::read_to_string(dir.path().join("b/bench_rows.csv")).unwrap();
    let mut ratios = Vec::new();
    for line in rows.lines().skip(1) {
        let v: Vec<&str> = line.split(',').collect();
        let elements: f64 = v[5].parse().unwrap();
        let bytes: f64 = v[7].parse().expect("alloc column filled");
        ratios.push(bytes / (8.0 * elements));
    }
    assert_eq!(ratios.len(), 9);
    let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));
    assert!(lo >= 0.5 && hi <= 4.0, "heap / (8 bytes x elements) ranged over [{lo:.2}, {hi:.2}]");
}
