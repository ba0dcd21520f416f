use std::path::Path;
use std::process::{Command, Output};

use image::{GrayImage, Luma, Rgb, RgbImage};
use tempfile::TempDir;

fn patchmil() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_patchmil"));
    cmd.env_remove("PATCHMIL_CONFIG").env("RUST_LOG", "warn");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn patchmil")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes `name.png` with a disc-shaped sidecar mask and a detector box.
fn stub_image(dir: &Path, name: &str, confidence: f64) {
    let (w, h) = (96u32, 80u32);
    let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 2) as u8, (y * 3) as u8, 120]));
    img.save(dir.join(format!("{name}.png"))).unwrap();
    let mask = GrayImage::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - 48.0, y as f64 - 40.0);
        Luma([if dx * dx + dy * dy < 900.0 { 255 } else { 0 }])
    });
    mask.save(dir.join(format!("{name}.mask.png"))).unwrap();
    std::fs::write(
        dir.join(format!("{name}.box.txt")),
        format!("18 10 78 70 {confidence}\n"),
    )
    .unwrap();
}

/// Small synthetic set with a short training config.
fn synth(dir: &Path, count: usize) {
    let out = run(patchmil()
        .args([
            "synth",
            "--count",
            &count.to_string(),
            "--seed",
            "5",
            "--out",
        ])
        .arg(dir));
    assert!(out.status.success(), "{}", stderr(&out));
    let path = dir.join("config.json");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    cfg["train"]["epochs"] = 1.into();
    cfg["crossval"]["k"] = 2.into();
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn extract_writes_crops_and_skips_undetectable() {
    let input = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    for name in ["a", "b", "c"] {
        stub_image(input.path(), name, 0.9);
    }
    stub_image(input.path(), "d", 0.1);
    let res = run(patchmil()
        .args(["extract", "--adapters", "stub", "--input"])
        .arg(input.path())
        .arg("--out")
        .arg(out.path()));
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(stderr(&res).contains("skipping"));
    let manifest = std::fs::read_to_string(out.path().join("manifest.csv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines[0], "path,label,mask_path");
    assert_eq!(lines.len(), 4);
    for name in ["a", "b", "c"] {
        let crop = image::open(out.path().join(format!("{name}.png"))).unwrap();
        let mask = image::open(out.path().join(format!("{name}.mask.png"))).unwrap();
        assert_eq!((crop.width(), crop.height()), (mask.width(), mask.height()));
        assert!(out.path().join(format!("{name}.crop.json")).exists());
    }
    assert!(!out.path().join("d.png").exists());
}

#[test]
fn extract_empty_directory_fails() {
    let input = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    let res = run(patchmil()
        .args(["extract", "--input"])
        .arg(input.path())
        .arg("--out")
        .arg(out.path()));
    assert!(!res.status.success());
    assert!(stderr(&res).contains("no input images"), "{}", stderr(&res));
}

#[test]
fn missing_manifest_names_the_field() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 8);
    std::fs::remove_file(dir.path().join("manifest.csv")).unwrap();
    let res = run(patchmil()
        .arg("train")
        .arg("--config")
        .arg(dir.path().join("config.json")));
    assert!(!res.status.success());
    assert!(stderr(&res).contains("paths.manifest"), "{}", stderr(&res));
}

#[test]
fn missing_config_is_reported() {
    let res = run(patchmil().arg("crossval"));
    assert!(!res.status.success());
    assert!(stderr(&res).contains("PATCHMIL_CONFIG"));
}

#[test]
fn crossval_repeats_byte_for_byte_and_reads_env_config() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 24);
    let cfg = dir.path().join("config.json");
    let metrics = dir.path().join("run").join("metrics.csv");
    let res = run(patchmil().arg("crossval").arg("--config").arg(&cfg));
    assert!(res.status.success(), "{}", stderr(&res));
    let first = std::fs::read(&metrics).unwrap();
    let res = run(patchmil().arg("crossval").env("PATCHMIL_CONFIG", &cfg));
    assert!(res.status.success(), "{}", stderr(&res));
    assert_eq!(first, std::fs::read(&metrics).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("fold,accuracy,precision,recall,f1\n"));
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().last().unwrap().starts_with("average,"));
}

#[test]
fn infer_with_missing_checkpoint_fails() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 4);
    let res = run(patchmil()
        .args(["infer", "--checkpoint"])
        .arg(dir.path().join("nope.safetensors"))
        .arg("--input")
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("det")));
    assert!(!res.status.success());
    assert!(stderr(&res).contains("nope.safetensors"));
}

#[test]
fn train_then_infer_writes_outputs_and_needs_masks() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 12);
    let res = run(patchmil()
        .arg("train")
        .arg("--config")
        .arg(dir.path().join("config.json")));
    assert!(res.status.success(), "{}", stderr(&res));
    let ck = dir.path().join("run").join("best.safetensors");
    assert!(ck.exists());

    let det = dir.path().join("det");
    let res = run(patchmil()
        .arg("infer")
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--input")
        .arg(dir.path())
        .arg("--out")
        .arg(&det));
    assert!(res.status.success(), "{}", stderr(&res));
    for suffix in ["det.json", "boxes.png", "rollout.png"] {
        assert!(det.join(format!("syn00000.{suffix}")).exists(), "{suffix}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(det.join("syn00000.det.json")).unwrap())
            .unwrap();
    let keys: Vec<&str> = json
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    assert_eq!(keys, ["bag_label", "bag_score", "boxes"]);

    // Images without masks need --no-edge-mask.
    let bare = dir.path().join("bare");
    std::fs::create_dir(&bare).unwrap();
    std::fs::copy(dir.path().join("syn00000.png"), bare.join("img.png")).unwrap();
    let out = dir.path().join("bare_det");
    let res = run(patchmil()
        .arg("infer")
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--input")
        .arg(&bare)
        .arg("--out")
        .arg(&out));
    assert!(!res.status.success());
    assert!(stderr(&res).contains("--no-edge-mask"));
    let res = run(patchmil()
        .arg("infer")
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--input")
        .arg(&bare)
        .arg("--out")
        .arg(&out)
        .arg("--no-edge-mask"));
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(out.join("img.det.json").exists());

    let ro = dir.path().join("ro");
    let res = run(patchmil()
        .arg("rollout")
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--input")
        .arg(dir.path())
        .arg("--out")
        .arg(&ro));
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(ro.join("syn00000.rollout.png").exists());
    assert!(!ro.join("syn00000.det.json").exists());
}

#[test]
fn train_resume_continues_from_last_checkpoint() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 12);
    let cfg = dir.path().join("config.json");
    let res = run(patchmil().arg("train").arg("--config").arg(&cfg));
    assert!(res.status.success(), "{}", stderr(&res));
    let res = run(patchmil()
        .arg("train")
        .arg("--resume")
        .arg("--config")
        .arg(&cfg));
    assert!(res.status.success(), "{}", stderr(&res));
}

#[test]
fn synthetic_ground_truth_is_written() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 4);
    let gt: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("syn00000.gt.json")).unwrap(),
    )
    .unwrap();
    assert!(gt.get("planted_patches").is_some());
}
