use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fnf_core::container::Archive;
use fnf_core::image::{load_image, quantize16, save_image, BitDepth, ImageMeta};
use fnf_core::kernel::read_kernel_dump;
use fnf_core::render::render_srgb;
use fnf_core::simulation::{SamplePair, SimConfig};
use fnf_core::training::{HistoryRecord, LOG_FILE};
use fnf_core::LinearImage;
use serde_json::Value;

const TINY: &str = r#"{
  "network": {"j": 2, "k": 3, "d": 1, "base_channels": 4},
  "train": {"val_interval": 2, "checkpoint_interval": 2},
  "sim": {"crop_size": 64},
  "protocol": {"crop_size": 64, "n_images": 2, "dim_factors": [50.0], "displacement_bins": [0.0, 20.0]},
  "val_images": 1
}"#;

fn fnf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fnf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fnf")
}

fn ok(args: &[&str]) -> Output {
    let out = fnf(args);
    assert!(
        out.status.success(),
        "fnf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn read_log(dir: &Path) -> Vec<HistoryRecord> {
    fs::read_to_string(dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Initial tiny weights written by `train --max-steps 0`.
fn tiny_weights(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = dir.join("model");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--max-steps", "0"]);
    out.join("final")
}

/// A flash/no-flash PNG pair with sidecars, from a simulated sample.
fn png_pair(dir: &Path, size: usize) -> (PathBuf, PathBuf) {
    let sample = SimConfig { crop_size: size, ..SimConfig::default() }.generate(3, 0).unwrap();
    let mut meta = ImageMeta::from_render(&sample.render);
    meta.sigma_r = Some(sample.noise.sigma_r);
    meta.sigma_s = Some(sample.noise.sigma_s);
    let clip = |img: &LinearImage| img.map(|v| v.clamp(0.0, 1.0));
    let f = dir.join(format!("flash_{size}.png"));
    let nf = dir.join(format!("noflash_{size}.png"));
    save_image(&f, &clip(&sample.x_f), BitDepth::Sixteen, Some(&meta)).unwrap();
    save_image(&nf, &clip(&sample.x_nf), BitDepth::Sixteen, Some(&meta)).unwrap();
    (f, nf)
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path());
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for out in [&a, &b] {
        ok(&["simulate", "--config", s(&cfg), "--out", s(out), "-n", "1", "--seed", "42"]);
    }
    let name = fnf_cli::sample_file_name(42, 0);
    let (x, y) = (fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    assert!(!x.is_empty());
    assert_eq!(x, y);
    let m = manifest(&a.join("manifest.json"));
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["seed"], 42);
    assert!(m["started"].as_str().unwrap() <= m["finished"].as_str().unwrap());
}

#[test]
fn invalid_config_key_exits_2_naming_the_key() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.json");
    fs::write(&cfg, r#"{"sim": {"dim_rnage": [2, 50]}}"#).unwrap();
    let out = fnf(&["simulate", "--config", s(&cfg), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dim_rnage"));
    fs::write(&cfg, r#"{"sim": {}, "trian": {}}"#).unwrap();
    let out = fnf(&["train", "--config", s(&cfg), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(fnf(&["simulate"]).status.code(), Some(2));
    assert_eq!(fnf(&["frobnicate"]).status.code(), Some(2));
    let t = tempfile::tempdir().unwrap();
    let out = fnf(&["simulate", "--config", s(&t.path().join("missing.json")), "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = t.path().join("c.json");
    fs::write(&cfg, r#"{"sim": {"crop_size": 100}}"#).unwrap();
    let out = fnf(&["simulate", "--config", s(&cfg), "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn hundred_default_samples_pass_the_validator() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("data");
    ok(&["simulate", "--out", s(&out), "-n", "100"]);
    let v = ok(&["validate", s(&out)]);
    let text = String::from_utf8_lossy(&v.stdout);
    assert!(text.contains("100 of 100 samples valid"), "{text}");
}

#[test]
fn validator_rejects_a_broken_sample() {
    let t = tempfile::tempdir().unwrap();
    let mut sample = SimConfig { crop_size: 64, ..SimConfig::default() }.generate(1, 0).unwrap();
    sample.render.gain *= 2.0;
    let p = t.path().join("bad.npzlike");
    sample.save(&p).unwrap();
    let out = fnf(&["validate", s(&p)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn config_precedence_flags_over_file_over_defaults() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.json");
    fs::write(&cfg, r#"{"sim": {"crop_size": 64}, "train": {"seed": 5, "lr_init": 0.002}}"#).unwrap();
    let out = t.path().join("o");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out), "-n", "1", "--seed", "9", "--reference", "flash"]);
    let eff = &manifest(&out.join("manifest.json"))["config"]["effective"];
    assert_eq!(eff["train"]["seed"], 9);
    assert_eq!(eff["train"]["lr_init"], 0.002);
    assert_eq!(eff["sim"]["crop_size"], 64);
    assert_eq!(eff["sim"]["reference"], "flash");
    assert_eq!(eff["train"]["eta"], 1.0);
    assert_eq!(eff["sim"]["dim_range"], serde_json::json!([2.0, 50.0]));
    let sample = SamplePair::load(out.join(fnf_cli::sample_file_name(9, 0))).unwrap();
    assert_eq!(sample.dims(), (64, 64));
}

#[test]
fn zero_steps_writes_initial_weights_and_empty_log() {
    let t = tempfile::tempdir().unwrap();
    let w = tiny_weights(t.path());
    assert!(w.join("params.npzlike").is_file());
    assert!(read_log(w.parent().unwrap()).is_empty());
    let m = manifest(&w.parent().unwrap().join("manifest.json"));
    assert_eq!(m["config"]["effective"]["train"]["max_steps"], 0);
}

#[test]
fn resumed_training_continues_the_loss_curve() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path());
    let full = t.path().join("full");
    let part = t.path().join("part");
    ok(&["train", "--config", s(&cfg), "--out", s(&full), "--max-steps", "4"]);
    ok(&["train", "--config", s(&cfg), "--out", s(&part), "--max-steps", "2"]);
    assert_eq!(read_log(&part).len(), 2);
    let ckpt = part.join("step_0000002");
    ok(&["train", "--config", s(&cfg), "--out", s(&part), "--max-steps", "4", "--resume", s(&ckpt)]);
    let (a, b) = (read_log(&full), read_log(&part));
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
}

#[test]
fn training_from_a_saved_dataset() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path());
    let data = t.path().join("data");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data), "-n", "2"]);
    let out = t.path().join("m");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--max-steps", "2"]);
    assert_eq!(read_log(&out).len(), 2);
    let m = manifest(&out.join("manifest.json"));
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);
    let wrong = fnf(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--reference", "flash",
    ]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn denoise_rejects_mismatched_sizes() {
    let t = tempfile::tempdir().unwrap();
    let w = tiny_weights(t.path());
    let (f, _) = png_pair(t.path(), 64);
    let (_, nf) = png_pair(t.path(), 96);
    let out = fnf(&["denoise", "--weights", s(&w), "--flash", s(&f), "--noflash", s(&nf), "--out", s(&t.path().join("o.png"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn denoise_rejects_missing_weights() {
    let t = tempfile::tempdir().unwrap();
    let (f, nf) = png_pair(t.path(), 64);
    let out = fnf(&[
        "denoise", "--weights", s(&t.path().join("none")), "--flash", s(&f), "--noflash", s(&nf), "--out",
        s(&t.path().join("o.png")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn denoise_intermediates_recompose_the_output_exactly() {
    let t = tempfile::tempdir().unwrap();
    let w = tiny_weights(t.path());
    let (f, nf) = png_pair(t.path(), 64);
    let out = t.path().join("res").join("out.png");
    ok(&[
        "denoise", "--weights", s(&w), "--flash", s(&f), "--noflash", s(&nf), "--sigma-r", "0.003", "--sigma-s",
        "0.001", "--out", s(&out), "--dump-intermediates",
    ]);
    let (rendered, meta) = load_image(&out).unwrap();
    assert_eq!(rendered.dims(), (64, 64));
    let arc = Archive::load(t.path().join("res").join("out.intermediates.npzlike")).unwrap();
    let img = |n: &str| LinearImage::from_planar(64, 64, arc.f32(n).unwrap().1.to_vec()).unwrap();
    let product = img("filtered").zip_map(&img("scale_map"), |a, b| a * b).unwrap();
    assert_eq!(product, img("output"));
    let recomposed = render_srgb(&product, &meta.render_params());
    for (a, b) in recomposed.data().iter().zip(rendered.data()) {
        assert_eq!(quantize16(*a) as f32 / 65535.0, *b);
    }
    assert!(t.path().join("res").join("out_filtered.png").is_file());
    assert!(t.path().join("res").join("out_scale_map.png").is_file());
    let m = manifest(&t.path().join("res").join("out.manifest.json"));
    assert_eq!(m["inputs"].as_array().unwrap().len(), 3);
}

#[test]
fn denoise_needs_noise_levels() {
    let t = tempfile::tempdir().unwrap();
    let w = tiny_weights(t.path());
    let sample = SimConfig { crop_size: 64, ..SimConfig::default() }.generate(3, 0).unwrap();
    let f = t.path().join("f.png");
    let nf = t.path().join("nf.png");
    save_image(&f, &sample.x_f.map(|v| v.max(0.0)), BitDepth::Sixteen, None).unwrap();
    save_image(&nf, &sample.x_nf.map(|v| v.max(0.0)), BitDepth::Sixteen, None).unwrap();
    let o = t.path().join("o.png");
    let out = fnf(&["denoise", "--weights", s(&w), "--flash", s(&f), "--noflash", s(&nf), "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(2));
    ok(&[
        "denoise", "--weights", s(&w), "--flash", s(&f), "--noflash", s(&nf), "--out", s(&o), "--sigma-r", "0.003",
        "--sigma-s", "0.001", "--gain", "10",
    ]);
}

#[test]
fn benchmark_is_reproducible_with_one_row_per_model() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path());
    let w = tiny_weights(t.path());
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for out in [&a, &b] {
        ok(&["benchmark", "--config", s(&cfg), "--weights", s(&w), "--out", s(out), "--seed", "3", "--triptychs", "1"]);
    }
    for f in ["table.csv", "curve.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let table: Value = serde_json::from_str(&fs::read_to_string(a.join("table.json")).unwrap()).unwrap();
    assert_eq!(table["methods"].as_array().unwrap().len(), 1);
    assert_eq!(fs::read_to_string(a.join("table.md")).unwrap().lines().count(), 3);
    assert!(a.join("triptych_ours_000.png").is_file());
    let c = t.path().join("c");
    ok(&["benchmark", "--config", s(&cfg), "--weights", s(&w), "--out", s(&c), "--seed", "4", "--no-curve"]);
    assert_ne!(fs::read(a.join("table.csv")).unwrap(), fs::read(c.join("table.csv")).unwrap());
    assert!(!c.join("curve.csv").exists());
}

#[test]
fn benchmark_rejects_missing_weights() {
    let t = tempfile::tempdir().unwrap();
    let out = fnf(&["benchmark", "--weights", s(&t.path().join("nope")), "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn benchmark_reads_a_protocol_file() {
    let t = tempfile::tempdir().unwrap();
    let w = tiny_weights(t.path());
    let p = t.path().join("protocol.json");
    fs::write(&p, r#"{"crop_size": 64, "n_images": 1, "dim_factors": [25.0, 50.0]}"#).unwrap();
    let out = t.path().join("o");
    ok(&["benchmark", "--weights", s(&w), "--protocol", s(&p), "--out", s(&out), "--no-curve", "--triptychs", "0"]);
    let csv = fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    fs::write(&p, r#"{"crop_sise": 64}"#).unwrap();
    let bad = fnf(&["benchmark", "--weights", s(&w), "--protocol", s(&p), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn export_kernels_writes_dump_and_pictures() {
    let t = tempfile::tempdir().unwrap();
    let w = tiny_weights(t.path());
    let sample = SimConfig { crop_size: 64, ..SimConfig::default() }.generate(2, 0).unwrap();
    let sp = t.path().join("s.npzlike");
    sample.save(&sp).unwrap();
    let out = t.path().join("k");
    ok(&["export-kernels", "--weights", s(&w), "--sample", s(&sp), "--pixel", "3,4", "--pixel", "32,32", "--zoom", "2", "--out", s(&out)]);
    let (basis, fields) = read_kernel_dump(out.join("kernels.fnfk")).unwrap();
    assert_eq!((basis.size(), basis.kernel_size(), basis.upsampling()), (2, 3, 1));
    assert_eq!(fields.coeffs.shape(), [1, 2, 64, 64]);
    let (img, _) = load_image(out.join("kernel_3_4.png")).unwrap();
    assert_eq!(img.dims(), (2 * basis.footprint(), 2 * basis.footprint()));
    assert!(out.join("kernel_32_32.png").is_file());
    let bad = fnf(&["export-kernels", "--weights", s(&w), "--sample", s(&sp), "--pixel", "64,0", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ablate_requires_exactly_one_ablation() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(fnf(&["ablate", "--out", s(t.path())]).status.code(), Some(2));
    let both = fnf(&["ablate", "--no-basis-b", "--reference", "flash", "--out", s(t.path())]);
    assert_eq!(both.status.code(), Some(2));
}

#[test]
fn content_hash_is_git_style() {
    // `git hash-object` with SHA-256 object format.
    assert_eq!(
        fnf_cli::manifest::blob_hash(b""),
        "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
    );
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("a"), b"1").unwrap();
    let h1 = fnf_cli::manifest::content_hash(t.path()).unwrap();
    fs::write(t.path().join("manifest.json"), b"{}").unwrap();
    assert_eq!(h1, fnf_cli::manifest::content_hash(t.path()).unwrap());
    fs::write(t.path().join("a"), b"2").unwrap();
    assert_ne!(h1, fnf_cli::manifest::content_hash(t.path()).unwrap());
}
