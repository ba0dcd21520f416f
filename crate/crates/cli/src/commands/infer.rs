use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patchmil::checkpoint::Checkpoint;
use patchmil::data::{load_sample, ManifestEntry, Normalization};
use patchmil::extraction::ExtractionSettings;
use patchmil::inference::render::save_png;
use patchmil::inference::{
    attention_rollout, detect, draw_boxes, heatmap_overlay, BoxStyle, InferenceSettings,
};
use patchmil::pipeline::DecisionRule;
use rayon::prelude::*;

use crate::inputs::{entries, optional_config};

pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub no_edge_mask: bool,
    pub merge: bool,
    pub threshold: Option<f64>,
    pub rule: Option<String>,
    pub config: Option<PathBuf>,
}

const HEATMAP_ALPHA: f64 = 0.5;

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

pub fn infer(args: InferArgs) -> Result<()> {
    let cfg = optional_config(args.config)?;
    let mut settings = cfg.as_ref().map(|c| c.inference).unwrap_or_default();
    let extraction = cfg.as_ref().map(|c| c.extraction).unwrap_or_default();
    let norm = cfg
        .as_ref()
        .map(|c| c.data.normalization)
        .unwrap_or_default();
    if args.no_edge_mask {
        settings.edge_mask = false;
    }
    if args.merge {
        settings.merge = true;
    }
    if let Some(t) = args.threshold {
        settings.threshold = t;
    }
    if let Some(r) = &args.rule {
        settings.decision_rule = r.parse::<DecisionRule>()?;
    }
    settings.validate()?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let inputs = entries(&args.input)?;
    if settings.edge_mask {
        if let Some(e) = inputs.iter().find(|e| e.mask_path.is_none()) {
            bail!(
                "{} has no mask; supply <stem>.mask.png or pass --no-edge-mask",
                e.path.display()
            );
        }
    }
    std::fs::create_dir_all(&args.out)?;
    let results: Vec<Result<()>> = inputs
        .par_iter()
        .map(|e| infer_one(e, &ck, &settings, &extraction, &norm, &args.out))
        .collect();
    finish(results, inputs.len())
}

fn finish(results: Vec<Result<()>>, total: usize) -> Result<()> {
    let mut failed = 0;
    for r in results {
        if let Err(e) = r {
            failed += 1;
            log::warn!("{e:#}");
        }
    }
    if failed == total {
        bail!("all {total} images failed");
    }
    log::info!("processed {} of {total} images", total - failed);
    Ok(())
}

fn infer_one(
    entry: &ManifestEntry,
    ck: &Checkpoint,
    settings: &InferenceSettings,
    extraction: &ExtractionSettings,
    norm: &Normalization,
    out: &Path,
) -> Result<()> {
    let model = &ck.model;
    let cfg = model.config().encoder;
    let sample = load_sample(entry, cfg.input_size, norm)
        .with_context(|| format!("loading {}", entry.path.display()))?;
    let result = detect(model, &sample, settings, extraction)?;
    let id = entry.id();
    result.write_json(&out.join(format!("{id}.det.json")))?;
    let original = image::open(&entry.path)?.to_rgb8();
    save_png(
        &draw_boxes(&original, &result.boxes, &BoxStyle::default()),
        &out.join(format!("{id}.boxes.png")),
    )?;
    if let Some(map) = &result.heatmap {
        let grid = cfg.grid()?;
        save_png(
            &heatmap_overlay(&original, map, &grid, HEATMAP_ALPHA)?,
            &out.join(format!("{id}.rollout.png")),
        )?;
    }
    Ok(())
}

pub fn rollout(checkpoint: &Path, input: &Path, out: &Path, config: Option<PathBuf>) -> Result<()> {
    let cfg = optional_config(config)?;
    let norm = cfg
        .as_ref()
        .map(|c| c.data.normalization)
        .unwrap_or_default();
    let ck = load_checkpoint(checkpoint)?;
    let inputs = entries(input)?;
    std::fs::create_dir_all(out)?;
    let enc = ck.model.config().encoder;
    let grid = enc.grid()?;
    let results: Vec<Result<()>> = inputs
        .par_iter()
        .map(|e| {
            let sample = load_sample(e, enc.input_size, &norm)?;
            let map = attention_rollout(&ck.model.forward(&sample.pixels)?.attention)?;
            let original = image::open(&e.path)?.to_rgb8();
            save_png(
                &heatmap_overlay(&original, &map, &grid, HEATMAP_ALPHA)?,
                &out.join(format!("{}.rollout.png", e.id())),
            )?;
            Ok(())
        })
        .collect();
    finish(results, inputs.len())
}
