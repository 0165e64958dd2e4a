//! Drives the installed binary through a miniature experiment: dataset
//! generation, training, evaluation, lattice scoring, attention export, and
//! the analytic reports.

use std::path::Path;
use std::process::{Command, Output};

use adaptsign_core::ctc::write_lattice_csv;
use adaptsign_core::{ExperimentConfig, SyntheticSpec, Tensor};

fn adaptsign(root: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_adaptsign"))
        .env("ADAPTSIGN_OUT_ROOT", root)
        .args(args)
        .output()
        .expect("binary launches");
    assert!(
        out.status.success(),
        "adaptsign {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_experiment_round_trip() {
    let root_dir = tempfile::tempdir().unwrap();
    let root = root_dir.path();

    let spec = SyntheticSpec {
        vocab: 3,
        len_range: (1, 2),
        frames_per_gloss: 6,
        image: 36,
        noise: 0.01,
        train: 4,
        dev: 2,
        test: 2,
        seed: 9,
    };
    let config = ExperimentConfig {
        data: spec.clone(),
        epochs: 1,
        eval_every: 1,
        seed: 5,
        ..ExperimentConfig::default()
    };
    let spec_path = root.join("spec.json");
    let config_path = root.join("config.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();

    adaptsign(
        root,
        &["gen-data", "--spec", spec_path.to_str().unwrap(), "--out", "data"],
    );
    assert!(root.join("data/train/index.json").exists());

    let out = adaptsign(
        root,
        &[
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--data",
            "data",
            "--out",
            "run",
        ],
    );
    assert!(stdout(&out).contains("dev WER"));
    assert!(root.join("run/metrics.csv").exists());
    assert!(root.join("run/final/weights.bin").exists());

    let out = adaptsign(
        root,
        &[
            "eval",
            "--checkpoint",
            "run/final",
            "--data",
            "data",
            "--split",
            "dev",
            "--samples",
            root.join("samples.json").to_str().unwrap(),
        ],
    );
    assert!(stdout(&out).contains("WER"));
    assert!(root.join("samples.json").exists());

    let lattice_path = root.join("lattice.csv");
    let uniform = (1.0f64 / 3.0).ln();
    write_lattice_csv(&lattice_path, &Tensor::from_vec(&[3, 3], vec![uniform; 9])).unwrap();
    let out = adaptsign(
        root,
        &[
            "eval",
            "--lattice",
            lattice_path.to_str().unwrap(),
            "--labels",
            "1,2",
        ],
    );
    let text = stdout(&out);
    assert!(text.contains("greedy decode"), "{text}");
    assert!(text.contains("ctc loss"), "{text}");

    let out = adaptsign(
        root,
        &[
            "dump-attn",
            "--checkpoint",
            "run/final",
            "--data",
            "data",
            "--split",
            "test",
            "--index",
            "0",
            "--out",
            "attn",
        ],
    );
    assert!(stdout(&out).contains("spatial maps"));
    assert!(root.join("attn/spatial_f000.pgm").exists());
    assert!(root.join("attn/crossframe.csv").exists());

    let out = adaptsign(root, &["flops", "--backbone", "desk", "--frames", "4"]);
    let text = stdout(&out);
    assert!(text.contains("backbone"), "{text}");
    assert!(text.contains("cross-frame"), "{text}");
}
