//! Input discovery shared by the commands.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patchmil::config::{RunConfig, CONFIG_ENV};
use patchmil::data::{sample_id, DatasetManifest, ManifestEntry};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// `--config`, else `$PATCHMIL_CONFIG`.
pub fn config_path(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
}

pub fn require_config(flag: Option<PathBuf>) -> Result<RunConfig> {
    let Some(path) = config_path(flag) else {
        bail!("no config given; pass --config or set {CONFIG_ENV}");
    };
    RunConfig::load(&path).with_context(|| format!("config {}", path.display()))
}

/// Config whose values are checked but whose paths need not exist.
pub fn optional_config(flag: Option<PathBuf>) -> Result<Option<RunConfig>> {
    let Some(path) = config_path(flag) else {
        return Ok(None);
    };
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let cfg =
        RunConfig::from_json(&text, base).with_context(|| format!("config {}", path.display()))?;
    cfg.validate_values()
        .with_context(|| format!("config {}", path.display()))?;
    Ok(Some(cfg))
}

fn is_sidecar(name: &str) -> bool {
    name.ends_with(".mask.png") || name.ends_with(".boxes.png") || name.ends_with(".rollout.png")
}

/// Images directly inside `dir`, sorted, skipping masks and rendered overlays.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) && !is_sidecar(&name) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Labels from `dir/manifest.csv`, keyed by sample id.
pub fn labels_in(dir: &Path) -> Result<Option<HashMap<String, u8>>> {
    let path = dir.join("manifest.csv");
    if !path.is_file() {
        return Ok(None);
    }
    let m = DatasetManifest::load(&path).with_context(|| format!("manifest {}", path.display()))?;
    Ok(Some(
        m.entries().iter().map(|e| (e.id(), e.label)).collect(),
    ))
}

/// A manifest file as is, or a directory of images with `<stem>.mask.png` masks.
pub fn entries(input: &Path) -> Result<Vec<ManifestEntry>> {
    if input.is_file() {
        let m = DatasetManifest::load(input)
            .with_context(|| format!("manifest {}", input.display()))?;
        return Ok(m.entries().to_vec());
    }
    let images = list_images(input)?;
    if images.is_empty() {
        bail!("no input images in {}", input.display());
    }
    let labels = labels_in(input)?.unwrap_or_default();
    Ok(images
        .into_iter()
        .map(|path| {
            let id = sample_id(&path);
            let mask = input.join(format!("{id}.mask.png"));
            ManifestEntry {
                label: labels.get(&id).copied().unwrap_or(0),
                mask_path: mask.is_file().then_some(mask),
                path,
            }
        })
        .collect())
}
