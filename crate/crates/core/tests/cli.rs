use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use srfkit::pipeline::ExperimentConfig;
use srfkit::raster::ImageBuffer;
use srfkit::render::render_image;
use srfkit::scene::load_dataset;
use srfkit::srf::SparseRadianceField;

const BIN: &str = env!("CARGO_BIN_EXE_srfkit");

/// Tiny but complete settings so each command finishes in seconds.
const TINY: &[&str] = &[
    "--resolution",
    "8",
    "--set",
    "fit.iterations=60",
    "--set",
    "fit.upsample_schedule=[20]",
    "--set",
    "partial_fit.iterations=30",
    "--set",
    "partial_fit.upsample_schedule=[10]",
    "--set",
    "image_size=16",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .args(TINY)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = run(dir, args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn pipeline(dir: &Path) {
    ok(dir, &["generate", "--views", "6/2/2", "--out", "ds"]);
    ok(dir, &["fit", "ds/manifest.json", "--whole", "--out", "fit"]);
    ok(dir, &["fit", "ds/manifest.json", "--partial", "3", "--out", "fit"]);
    ok(dir, &["fit", "ds/manifest.json", "--partial", "1", "--out", "fit"]);
    ok(dir, &["train", "--pair", "fit/partial3.srf,fit/whole.srf,ds/manifest.json", "--epochs", "2", "--out", "train"]);
    ok(dir, &["render", "fit/whole.srf", "--spiral", "4", "--out", "spiral"]);
    ok(dir, &["render", "fit/whole.srf", "--manifest", "ds/manifest.json", "--split", "test", "--out", "views"]);
    ok(dir, &["eval", "--srf", "fit/whole.srf", "--manifest", "ds/manifest.json", "--out", "eval_whole.json"]);
    ok(
        dir,
        &[
            "eval",
            "--checkpoint",
            "train/checkpoint.snet",
            "--partial",
            "fit/partial3.srf",
            "--manifest",
            "ds/manifest.json",
            "--reference",
            "fit/whole.srf",
            "--out",
            "eval_net.json",
        ],
    );
    ok(dir, &["mesh", "fit/whole.srf", "--out", "whole.obj"]);
}

fn hashes(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), hex);
            }
        }
    }
    out
}

#[test]
fn every_command_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (ha, hb) = (hashes(a.path()), hashes(b.path()));
    assert!(ha.len() >= 25, "{} artifacts", ha.len());
    assert_eq!(ha, hb);
}

#[test]
fn outputs_are_what_the_commands_promise() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    assert_eq!(std::fs::read_dir(d.join("spiral")).unwrap().count(), 4);
    assert!(std::fs::read_to_string(d.join("whole.obj")).unwrap().contains("\nf "));

    let partial = SparseRadianceField::load(d.join("fit/partial3.srf")).unwrap();
    assert_eq!(partial.color_dim(), 3);
    let whole = SparseRadianceField::load(d.join("fit/whole.srf")).unwrap();
    assert_eq!(whole.color_dim(), 12);

    let history: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("train/history.json")).unwrap()).unwrap();
    assert_eq!(history["schema_version"], 1);
    assert_eq!(history["history"].as_array().unwrap().len(), 2);

    for name in ["eval_whole.json", "eval_net.json"] {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join(name)).unwrap()).unwrap();
        assert_eq!(v["schema_version"], 1);
        for split in ["train", "test", "ood"] {
            assert!(v[split]["psnr"].is_number(), "{name} {split}");
        }
    }
    let net: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval_net.json")).unwrap()).unwrap();
    assert!(net["test"]["validation_accuracy"].is_number());

    let whole_eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval_whole.json")).unwrap()).unwrap();
    let (train, test) = (whole_eval["train"]["psnr"].as_f64().unwrap(), whole_eval["test"]["psnr"].as_f64().unwrap());
    assert!(train >= test, "train {train} < test {test}");
}

#[test]
fn rendered_view_matches_library_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--views", "3/2/1", "--out", "ds"]);
    ok(d, &["fit", "ds/manifest.json", "--whole", "--out", "fit"]);
    ok(d, &["render", "fit/whole.srf", "--manifest", "ds/manifest.json", "--split", "test", "--out", "views"]);
    let data = load_dataset(d.join("ds/manifest.json")).unwrap();
    let srf = SparseRadianceField::load(d.join("fit/whole.srf")).unwrap();
    let cfg = ExperimentConfig::desk().with_resolution(8);
    let test = data.split_indices(srfkit::camera::Split::Test);
    for (n, &i) in test.iter().enumerate() {
        let want = render_image(&srf, &data.views[i], &cfg.fit.render).quantized();
        let got = ImageBuffer::load_png(d.join(format!("views/frame_{n:03}.png"))).unwrap();
        assert_eq!(got.to_rgba8(), want.to_rgba8());
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--views", "3/1/0", "--out", "ds"]);
    ok(d, &["fit", "ds/manifest.json", "--whole", "--out", "fit"]);

    let (c, msg) = code(d, &["fit", "ds/manifest.json", "--partial", "2"]);
    assert_eq!(c, 2, "{msg}");
    assert!(msg.contains("1 or 3"));

    let blocker = d.join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let (c, msg) = code(d, &["generate", "--out", "file/sub"]);
    assert_eq!(c, 2, "{msg}");
    assert!(msg.contains("file/sub"));

    assert_eq!(code(d, &["mesh", "fit/whole.srf", "--iso", "abc"]).0, 2);
    assert_eq!(code(d, &["generate", "--set", "rig.nope=3"]).0, 2);
    assert_eq!(code(d, &["generate", "--scene", "teapot"]).0, 2);
    assert_eq!(code(d, &["bogus"]).0, 2);

    std::fs::write(d.join("bad.srf"), b"NOPE0000").unwrap();
    let (c, msg) = code(d, &["render", "bad.srf"]);
    assert_eq!(c, 1);
    assert!(msg.contains("format"), "{msg}");

    let (c, msg) = code(d, &["train", "--pair", "fit/whole.srf,missing.srf,ds/manifest.json", "--epochs", "1"]);
    assert_eq!(c, 1);
    assert!(msg.contains("missing.srf"), "{msg}");
}

#[test]
fn empty_split_is_left_out() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--views", "3/1/0", "--out", "ds"]);
    ok(d, &["fit", "ds/manifest.json", "--whole", "--out", "fit"]);
    let out = run(d, &["eval", "--srf", "fit/whole.srf", "--manifest", "ds/manifest.json", "--out", "e.json"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ood"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e.json")).unwrap()).unwrap();
    assert!(v.get("ood").is_none());
    assert!(v["test"].is_object());
}

#[test]
fn empty_field_meshes_to_empty_obj() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    SparseRadianceField::new(8, 3).unwrap().save(d.join("empty.srf")).unwrap();
    ok(d, &["mesh", "empty.srf", "--out", "empty.obj"]);
    assert!(!std::fs::read_to_string(d.join("empty.obj")).unwrap().lines().any(|l| l.starts_with("f ")));
}

#[test]
fn config_file_and_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut cfg = ExperimentConfig::desk();
    cfg.rig.train = 2;
    cfg.rig.test = 1;
    cfg.rig.ood = 1;
    std::fs::write(d.join("exp.toml"), cfg.to_toml()).unwrap();
    let out = Command::new(BIN)
        .current_dir(d)
        .args(["generate", "--config", "exp.toml", "--out", "ds", "--set", "image_size=8"])
        .env("SRFKIT_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(d.join("ds/images")).unwrap().count(), 4);
    std::fs::write(d.join("bad.toml"), "seed = [").unwrap();
    assert_eq!(code(d, &["generate", "--config", "bad.toml"]).0, 2);
    assert_eq!(code(d, &["generate", "--config", "nowhere.toml"]).0, 1);
}
