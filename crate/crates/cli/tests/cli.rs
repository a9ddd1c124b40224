//! End-to-end checks of the command surface: each command runs as a child
//! process against a micro-scale configuration.

use scalesr_core::field::SRFactors;
use scalesr_core::gridio::{read_container, write_container, ContainerMeta};
use scalesr_core::{Preset, RunConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scalesr"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("scalesr-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn micro_config() -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.seed = 11;
    cfg.factors = SRFactors { s: 2, t: 2 };
    cfg.data.h = 16;
    cfg.data.w = 16;
    cfg.data.frames_per_tile = 14;
    cfg.hyper.context_len = 2;
    cfg.hyper.schedule.j_steps = 15;
    cfg.hyper.conservation.activation_epoch = 1;
    cfg.net.stages = 2;
    cfg.net.base_channels = 4;
    cfg.net.window_sizes = vec![1, 1, 1];
    cfg.net.heads = 2;
    cfg.net.step_embed_dim = 8;
    cfg.train.epochs = 2;
    cfg.train.early_stop_patience = 1;
    cfg.train.batch_size = 4;
    cfg.train.sample_stride = 4;
    cfg.train.eval_members = 2;
    cfg.train.eval_max_samples = 3;
    cfg.train.threads = 1;
    cfg
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_evaluate_sample_plot_round_trip() {
    let dir = workdir("pipeline");
    let cfg_path = dir.join("config.json");
    micro_config().save(&cfg_path).unwrap();
    let run_dir = dir.join("run");

    let out = bin()
        .args(["train", "--run-dir"])
        .arg(&run_dir)
        .args(["--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_ok(&out, "train");
    assert!(run_dir.join("weights/det.bin").exists());
    assert!(run_dir.join("weights/dif.bin").exists());
    assert!(run_dir.join("record.jsonl").exists());

    let out = bin()
        .args(["evaluate", "--run-dir"])
        .arg(&run_dir)
        .args(["--seed", "3"])
        .output()
        .unwrap();
    assert_ok(&out, "evaluate");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap())
            .unwrap();
    for row in ["full", "deterministic", "bicubic", "nearest"] {
        let entry = metrics.get(row).unwrap_or_else(|| panic!("missing row {row}"));
        for key in ["mse", "mae", "pe99", "lsd", "emd", "ssim", "pitd", "crps"] {
            assert!(
                entry.get(key).and_then(|v| v.as_f64()).is_some(),
                "row {row} missing {key}"
            );
        }
    }

    // Same seed twice: identical member files.
    let s1 = dir.join("samples1");
    let s2 = dir.join("samples2");
    for out_dir in [&s1, &s2] {
        let out = bin()
            .args(["sample", "--run-dir"])
            .arg(&run_dir)
            .args(["--members", "2", "--seed", "9", "--out"])
            .arg(out_dir)
            .output()
            .unwrap();
        assert_ok(&out, "sample");
    }
    let m1 = std::fs::read(s1.join("sample_0000/member_00.f32")).unwrap();
    let m2 = std::fs::read(s2.join("sample_0000/member_00.f32")).unwrap();
    assert!(!m1.is_empty());
    assert_eq!(m1, m2, "seeded sampling must be reproducible");
    let d1 = std::fs::read(s1.join("sample_0000/member_01.f32")).unwrap();
    assert_ne!(m1, d1, "members must differ");

    // Panel: (1 + K + 1) columns by T rows of 16x16 cells with 2px borders.
    let panel = dir.join("panel.png");
    let out = bin()
        .args(["plot", "--run-dir"])
        .arg(&run_dir)
        .args(["--members", "2", "--seed", "9", "--out"])
        .arg(&panel)
        .output()
        .unwrap();
    assert_ok(&out, "plot");
    let img = image::open(&panel).unwrap();
    let cols = 1 + 2 + 1;
    let rows = 2; // T
    assert_eq!(img.width(), (cols * 16 + (cols + 1) * 2) as u32);
    assert_eq!(img.height(), (rows * 16 + (rows + 1) * 2) as u32);

    std::fs::remove_dir_all(&dir).unwrap();
}

fn small_container(dir: &Path, nt: usize, ny: usize, nx: usize) {
    let meta = ContainerMeta {
        dims: vec!["time".into(), "y".into(), "x".into()],
        shape: vec![nt, ny, nx],
        variables: vec!["precip".into()],
        units: [("precip".to_string(), "mm/h".to_string())].into(),
        missing_value: Some(-999.0),
    };
    let values: Vec<f32> = (0..nt * ny * nx).map(|i| (i % 17) as f32 * 0.25).collect();
    let mut data = BTreeMap::new();
    data.insert("precip".to_string(), values);
    write_container(dir, &meta, &data).unwrap();
}

#[test]
fn coarsen_identity_and_mass() {
    let dir = workdir("coarsen");
    let input = dir.join("hr");
    small_container(&input, 4, 8, 8);

    // S = T = 1: byte-identical values, metadata preserved.
    let out_id = dir.join("lr-id");
    let out = bin()
        .args(["coarsen", "--input"])
        .arg(&input)
        .args(["--output"])
        .arg(&out_id)
        .args(["--factors", "1x1"])
        .output()
        .unwrap();
    assert_ok(&out, "coarsen 1x1");
    assert_eq!(
        std::fs::read(input.join("precip.f32")).unwrap(),
        std::fs::read(out_id.join("precip.f32")).unwrap()
    );
    let (meta_in, _) = read_container(&input).unwrap();
    let (meta_out, _) = read_container(&out_id).unwrap();
    assert_eq!(meta_in.units, meta_out.units);
    assert_eq!(meta_in.missing_value, meta_out.missing_value);

    // S = 2, T = 2: checksum recorded, identity asserted by the tool itself.
    let out_lr = dir.join("lr");
    let out = bin()
        .args(["coarsen", "--input"])
        .arg(&input)
        .args(["--output"])
        .arg(&out_lr)
        .args(["--factors", "2x2"])
        .output()
        .unwrap();
    assert_ok(&out, "coarsen 2x2");
    let (meta, data) = read_container(&out_lr).unwrap();
    assert_eq!(meta.shape, vec![2, 4, 4]);
    assert_eq!(data["precip"].len(), 32);
    let checksum: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_lr.join("checksum.json")).unwrap())
            .unwrap();
    let err = checksum["mass_identity"]["precip"]["relative_error"].as_f64().unwrap();
    assert!(err <= 1e-10);

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn structured_error_on_bad_input() {
    let dir = workdir("errors");
    // Invalid factors string.
    let out = bin()
        .args(["coarsen", "--input", "/nonexistent", "--output", "/tmp/x", "--factors", "banana"])
        .output()
        .unwrap();
    assert!(!out.status.success());

    // Missing container: structured JSON error on stderr.
    let out = bin()
        .args(["coarsen", "--input"])
        .arg(dir.join("missing"))
        .args(["--output"])
        .arg(dir.join("out"))
        .args(["--factors", "2x1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).expect("stderr must be JSON");
    assert!(v.get("error").is_some());

    // Config that fails validation (factor does not divide the tile).
    let mut cfg = micro_config();
    cfg.factors = SRFactors { s: 3, t: 1 };
    let cfg_path = dir.join("bad.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = bin()
        .args(["train", "--run-dir"])
        .arg(dir.join("run"))
        .args(["--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(serde_json::from_str::<serde_json::Value>(stderr.trim()).is_ok());

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sweep_writes_manifest() {
    let dir = workdir("sweep");
    let cfg_path = dir.join("config.json");
    micro_config().save(&cfg_path).unwrap();
    let grid = serde_json::json!({
        "l_candidates": [1, 2],
        "beta_max_candidates": [5e-3, 2e-2],
        "f_candidates": [],
        "rel_gain_threshold": 0.02,
    });
    let grid_path = dir.join("grid.json");
    std::fs::write(&grid_path, grid.to_string()).unwrap();
    let root = dir.join("sweeps");
    let out = bin()
        .args(["sweep", "--grid"])
        .arg(&grid_path)
        .args(["--run-root"])
        .arg(&root)
        .args(["--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_ok(&out, "sweep");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("sweep.json")).unwrap()).unwrap();
    let result = manifest.get("result").unwrap();
    let l = result["context_len"].as_u64().unwrap();
    assert!(l == 1 || l == 2);
    assert_eq!(result["attention_time"].as_u64().unwrap(), 2 * l);
    let beta = result["beta_max"].as_f64().unwrap();
    assert!(beta == 5e-3 || beta == 2e-2);
    std::fs::remove_dir_all(&dir).unwrap();
}
