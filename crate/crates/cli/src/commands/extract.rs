use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patchmil::data::{mask_to_image, sample_id, DatasetManifest, ManifestEntry, Normalization};
use patchmil::extraction::{
    extract_crop, CommandAdapter, Detector, ExtractionSettings, Segmenter, SidecarAdapter,
};
use serde::Serialize;

use crate::inputs::{labels_in, list_images, optional_config};
use crate::Adapters;

#[derive(Serialize)]
struct CropInfo {
    source: PathBuf,
    source_size: [usize; 2],
    crop_box: [usize; 4],
    confidence: f64,
}

pub fn run(
    input: &Path,
    adapters: Adapters,
    out: &Path,
    command: Option<PathBuf>,
    command_args: Vec<String>,
    config: Option<PathBuf>,
) -> Result<()> {
    let cfg = optional_config(config)?;
    let settings = cfg.as_ref().map(|c| c.extraction).unwrap_or_default();
    let norm = cfg
        .as_ref()
        .map(|c| c.data.normalization)
        .unwrap_or_default();
    let images = list_images(input)?;
    if images.is_empty() {
        bail!("no input images in {}", input.display());
    }
    let labels = labels_in(input)?;
    if labels.is_none() {
        log::warn!(
            "no manifest.csv in {}; every crop gets label 0",
            input.display()
        );
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let external;
    let (det, seg): (&dyn Detector, &dyn Segmenter) = match adapters {
        Adapters::Stub => (&SidecarAdapter, &SidecarAdapter),
        Adapters::External => {
            let Some(program) = command else {
                bail!("--adapters external needs --command");
            };
            let work_dir = out.join("adapter");
            std::fs::create_dir_all(&work_dir)?;
            external = CommandAdapter {
                program,
                args: command_args,
                work_dir,
            };
            (&external, &external)
        }
    };
    let mut entries = Vec::new();
    for path in &images {
        match extract_one(path, det, seg, &settings, &norm, out) {
            Ok((crop, mask)) => {
                let id = sample_id(path);
                let label = labels
                    .as_ref()
                    .and_then(|l| l.get(&id).copied())
                    .unwrap_or(0);
                entries.push(ManifestEntry {
                    path: crop,
                    label,
                    mask_path: Some(mask),
                });
            }
            Err(e) => log::warn!("skipping {}: {e:#}", path.display()),
        }
    }
    if entries.is_empty() {
        bail!("extraction failed for all {} images", images.len());
    }
    let n = entries.len();
    DatasetManifest::from_entries(entries)?.save(out.join("manifest.csv"))?;
    log::info!(
        "extracted {n} of {} images into {}",
        images.len(),
        out.display()
    );
    Ok(())
}

fn extract_one(
    path: &Path,
    det: &dyn Detector,
    seg: &dyn Segmenter,
    settings: &ExtractionSettings,
    norm: &Normalization,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let image = image::open(path).with_context(|| format!("decoding {}", path.display()))?;
    let crop = extract_crop(path, &image, det, seg, settings, norm)?;
    let id = sample_id(path);
    let crop_path = out.join(format!("{id}.png"));
    let mask_path = out.join(format!("{id}.mask.png"));
    crop.to_rgb(norm).save(&crop_path)?;
    mask_to_image(crop.mask.bits()).save(&mask_path)?;
    let b = crop.crop_box;
    let info = CropInfo {
        source: path.to_path_buf(),
        source_size: [crop.source_size.0, crop.source_size.1],
        crop_box: [b.x_min, b.y_min, b.x_max, b.y_max],
        confidence: crop.detection.confidence,
    };
    std::fs::write(
        out.join(format!("{id}.crop.json")),
        serde_json::to_string_pretty(&info)?,
    )?;
    Ok((crop_path, mask_path))
}
