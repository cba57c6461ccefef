use std::fs;
use std::path::{Path, PathBuf};

use diffedit::cli::{run, Manifest};
use serde_json::Value;

const TINY: &str = r#"{
  "dataset": {"size": 300},
  "train": {"steps": 30, "batch_size": 16},
  "sweep": {"base_steps": 8}
}"#;

const TINY_GM2D: &str = r#"{
  "dataset": {"family": "gm2d", "size": 400},
  "train": {"steps": 30, "batch_size": 32},
  "constants": {"n_samples": 20, "t_steps": 10, "power_points": 5, "power_iterations": 5, "pairs_per_point": 4},
  "curve": {"r_grid": [0.3, 0.6], "n_mc": 20, "base_steps": 10},
  "ot": {"n_points": 30, "replicates": 2, "base_steps": 10},
  "ot_ratios": [0.5]
}"#;

struct Run {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run.json");
        fs::write(&path, config).unwrap();
        let out = tmp.path().join("out");
        Self { config: path, out, _tmp: tmp }
    }

    fn with_out(&self, out: &Path, args: &[&str]) -> i32 {
        let mut argv = vec![
            "diffedit".to_string(),
            "--config".into(),
            self.config.display().to_string(),
            "--out".into(),
            out.display().to_string(),
            "--seed".into(),
            "7".into(),
        ];
        argv.extend(args.iter().map(|s| s.to_string()));
        run(argv)
    }

    fn cmd(&self, args: &[&str]) -> i32 {
        self.with_out(&self.out, args)
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_slice(&fs::read(self.out.join(rel)).unwrap()).unwrap()
    }
}

#[test]
fn missing_dataset_is_an_input_error() {
    let r = Run::new(TINY);
    assert_eq!(r.cmd(&["train"]), 2);
    assert_eq!(r.cmd(&["edit", "--index", "0", "--query", "circle"]), 2);
    assert_eq!(r.cmd(&["verify"]), 2);
}

#[test]
fn strict_config_and_usage_errors() {
    let r = Run::new(r#"{"dataset": {"size": 10, "colour": 3}}"#);
    assert_eq!(r.cmd(&["dataset"]), 2);
    let ok = Run::new(TINY);
    assert_eq!(ok.cmd(&["ablation", "--kind", "blur"]), 2);
    assert_eq!(ok.cmd(&["edit", "--index", "0"]), 2);
    assert_eq!(run(["diffedit", "--help"]), 0);
}

#[test]
fn dataset_emits_configured_count_and_verifies() {
    let r = Run::new(TINY);
    assert_eq!(r.cmd(&["dataset"]), 0);
    let (spec, samples) = diffedit::dataset::load(&r.out.join("dataset")).unwrap();
    assert_eq!(samples.len(), 300);
    assert_eq!(spec.size, 300);
    let config = r.json("dataset/config.json");
    assert!(config["out"].is_null());
    assert_eq!(r.cmd(&["verify"]), 0);
    let payload = r.out.join("dataset/data.f32le");
    let mut bytes = fs::read(&payload).unwrap();
    bytes[0] ^= 1;
    fs::write(&payload, bytes).unwrap();
    assert_eq!(r.cmd(&["verify"]), 2);
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let r = Run::new(TINY);
    let other = r.out.with_file_name("again");
    for out in [&r.out, &other] {
        assert_eq!(r.with_out(out, &["dataset"]), 0);
        assert_eq!(r.with_out(out, &["train"]), 0);
    }
    for file in ["train/denoiser.ckpt", "train/loss.csv", "train/manifest.json", "train/config.json"] {
        assert_eq!(fs::read(r.out.join(file)).unwrap(), fs::read(other.join(file)).unwrap(), "{file}");
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(r.out.join("train/manifest.json")).unwrap()).unwrap();
    assert!(manifest.inputs.iter().any(|f| f.path == "dataset/dataset.json"));
    let loss = fs::read_to_string(r.out.join("train/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,loss"));
    assert_eq!(loss.lines().count(), 31);
}

#[test]
fn edit_artifacts_depend_on_method() {
    let r = Run::new(TINY);
    assert_eq!(r.cmd(&["dataset"]), 0);
    assert_eq!(r.cmd(&["train"]), 0);

    assert_eq!(r.cmd(&["edit", "--index", "0", "--query", "circle", "--r", "0.5"]), 0);
    for f in ["input.pgm", "output.pgm", "mask_soft.pgm", "mask_binary.pgm", "edit.json"] {
        assert!(r.out.join("edit").join(f).exists(), "{f}");
    }
    let sidecar = r.json("edit/edit.json");
    assert_eq!(sidecar["method"], "diffedit");
    assert!(sidecar["distance"].as_f64().unwrap().is_finite());
    assert_eq!(sidecar["mask"]["degenerate"], false);

    assert_eq!(r.cmd(&["edit", "--index", "0", "--query", "circle", "--method", "sdedit"]), 0);
    assert!(r.out.join("edit/output.pgm").exists());
    assert!(!r.out.join("edit/mask_soft.pgm").exists());
    assert!(!r.out.join("edit/mask_binary.pgm").exists());
    assert!(r.json("edit/edit.json")["mask"].is_null());

    let (_, samples) = diffedit::dataset::load(&r.out.join("dataset")).unwrap();
    let class = diffedit::dataset::SHAPE_NAMES[samples[0].class];
    assert_eq!(r.cmd(&["edit", "--index", "0", "--query", class, "--reference", class]), 0);
    assert_eq!(r.json("edit/edit.json")["mask"]["degenerate"], true);

    let input = r.out.join("edit/input.pgm");
    let copy = r.out.with_file_name("input.pgm");
    fs::copy(&input, &copy).unwrap();
    let copy = copy.display().to_string();
    assert_eq!(r.cmd(&["mask", "--input", &copy, "--source", class, "--query", "triangle"]), 0);
    let mask = r.json("mask/mask.json");
    let area = mask["area"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&area));
    assert_eq!(r.cmd(&["mask", "--input", &copy, "--query", "triangle"]), 2);
    assert_eq!(r.cmd(&["verify"]), 0);
}

#[test]
fn evaluation_needs_a_classifier_and_the_right_family() {
    let r = Run::new(TINY);
    assert_eq!(r.cmd(&["dataset"]), 0);
    assert_eq!(r.cmd(&["train"]), 0);
    assert_eq!(r.cmd(&["sweep"]), 2);
    assert_eq!(r.cmd(&["bounds"]), 2);
    assert_eq!(r.cmd(&["ot"]), 2);
}

#[test]
fn undertrained_classifier_fails_the_gate() {
    let r = Run::new(
        r#"{"dataset": {"size": 300}, "classifier": {"steps": 5, "holdout": 100, "width": 8, "hidden_layers": 1}}"#,
    );
    assert_eq!(r.cmd(&["dataset"]), 0);
    assert_eq!(r.cmd(&["train-classifier"]), 4);
    let report = r.json("classifier/classifier.json");
    assert!(report["holdout_accuracy"].as_f64().unwrap() < 0.95);
}

#[test]
fn gm2d_bounds_and_ot_are_reproducible() {
    let r = Run::new(TINY_GM2D);
    let other = r.out.with_file_name("again");
    for (out, jobs) in [(&r.out, "1"), (&other, "4")] {
        for cmd in ["dataset", "train", "bounds", "ot"] {
            assert_eq!(r.with_out(out, &["--jobs", jobs, cmd]), 0, "{cmd}");
        }
    }
    for file in ["bounds/bounds.csv", "bounds/manifest.json", "ot/ot.csv", "ot/manifest.json"] {
        assert_eq!(fs::read(r.out.join(file)).unwrap(), fs::read(other.join(file)).unwrap(), "{file}");
    }
    let csv = fs::read_to_string(r.out.join("bounds/bounds.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 8);
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(r.cmd(&["edit", "--index", "0", "--query", "2", "--method", "encode-decode"]), 0);
    assert_eq!(r.json("edit/edit.json")["output"].as_array().unwrap().len(), 2);
    assert_eq!(r.cmd(&["verify"]), 0);
}
