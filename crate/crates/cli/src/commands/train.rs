use std::path::PathBuf;

use anyhow::{Context, Result};
use patchmil::checkpoint::{load_pretrained, Archive, Checkpoint};
use patchmil::config::RunConfig;
use patchmil::data::{load_all, DatasetManifest, ImageSample};
use patchmil::model::Model;
use patchmil::pipeline::{
    crossvalidate, stratified_holdout, train as fit, CrossValOptions, Resume, TrainOptions,
};

use crate::inputs::require_config;

fn load_samples(cfg: &RunConfig) -> Result<Vec<ImageSample>> {
    let path = cfg.manifest_path();
    let manifest =
        DatasetManifest::load(&path).with_context(|| format!("manifest {}", path.display()))?;
    let samples = load_all(
        &manifest,
        cfg.model.encoder.input_size,
        &cfg.data.normalization,
    )?;
    let (neg, pos) = manifest.class_counts();
    log::info!(
        "loaded {} samples ({pos} positive, {neg} negative)",
        samples.len()
    );
    Ok(samples)
}

/// Random model seeded from `seed`, with pretrained encoder weights when configured.
fn initial_model(cfg: &RunConfig, seed: u64) -> patchmil::Result<Model> {
    let mut model = Model::random(cfg.model, seed)?;
    if let Some(path) = cfg.pretrained_path() {
        let archive = Archive::load(&path)?;
        let loaded = load_pretrained(&archive, &cfg.model.encoder, model.params_mut())?;
        log::info!(
            "loaded {} encoder tensors from {}",
            loaded.len(),
            path.display()
        );
    }
    Ok(model)
}

fn edge(
    cfg: &RunConfig,
    samples: &[ImageSample],
) -> Option<patchmil::extraction::ExtractionSettings> {
    let masked = cfg.inference.edge_mask && samples.iter().all(|s| s.mask.is_some());
    if cfg.inference.edge_mask && !masked {
        log::warn!("some samples lack masks; validation scores every patch");
    }
    masked.then_some(cfg.extraction)
}

pub fn train(config: Option<PathBuf>, resume: bool) -> Result<()> {
    let cfg = require_config(config)?;
    let tcfg = cfg.train_config();
    let samples = load_samples(&cfg)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let all: Vec<usize> = (0..samples.len()).collect();
    let (fit_idx, val_idx) = stratified_holdout(&all, &labels, tcfg.validation_fraction, tcfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>();
    let out = cfg.output_dir();
    let resume = if resume {
        Some(Resume::from_dir(&out).with_context(|| format!("resuming from {}", out.display()))?)
    } else {
        None
    };
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        edge: edge(&cfg, &samples),
        selection_rule: cfg.inference.decision_rule,
        resume,
        stop_after: None,
    };
    let outcome = fit(
        initial_model(&cfg, cfg.seed)?,
        &pick(&fit_idx),
        &pick(&val_idx),
        &tcfg,
        &cfg.loss,
        &opts,
    )?;
    if let (Some(first), Some(last)) = (
        outcome.curve.first_epoch_loss(),
        outcome.curve.last_epoch_loss(),
    ) {
        log::info!(
            "train loss {first:.5} -> {last:.5}; best epoch {}",
            outcome.best_epoch
        );
    }
    // The best model is already in best.safetensors; confirm it reloads.
    Checkpoint::load(out.join(patchmil::pipeline::train::BEST_CHECKPOINT))?;
    println!(
        "{}",
        out.join(patchmil::pipeline::train::BEST_CHECKPOINT)
            .display()
    );
    Ok(())
}

pub fn crossval(config: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = require_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samples = load_samples(&cfg)?;
    let opts = CrossValOptions {
        k: cfg.crossval.k,
        rule: cfg.inference.decision_rule,
        edge: edge(&cfg, &samples),
        out_dir: Some(cfg.output_dir()),
    };
    let result = crossvalidate(
        &samples,
        |fold| initial_model(&cfg, cfg.seed.wrapping_add(fold as u64)),
        &cfg.train_config(),
        &cfg.loss,
        &opts,
    )?;
    print!("{}", result.to_text()?);
    Ok(())
}
