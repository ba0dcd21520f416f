use std::path::Path;

use anyhow::{Context, Result};
use patchmil::config::{PathsConfig, RunConfig};
use patchmil::model::ModelConfig;
use patchmil::synthetic::{generate, SyntheticSpec, MANIFEST_NAME};

pub fn run(out: &Path, count: usize, seed: u64, size: usize) -> Result<()> {
    let spec = SyntheticSpec {
        count,
        image_size: size,
        ..Default::default()
    };
    let manifest =
        generate(&spec, seed, out).with_context(|| format!("generating into {}", out.display()))?;
    let mut model = ModelConfig::toy();
    model.encoder.input_size = (size, size);
    let mut cfg = RunConfig::new(
        PathsConfig {
            manifest: MANIFEST_NAME.into(),
            output_dir: "run".into(),
            checkpoint: None,
            pretrained: None,
        },
        model,
    );
    cfg.seed = seed;
    cfg.train.learning_rate = 1e-3;
    cfg.train.batch_size = 16;
    cfg.save(out.join("config.json"))?;
    let (neg, pos) = manifest.class_counts();
    log::info!(
        "wrote {} images ({pos} positive, {neg} negative) and config.json to {}",
        manifest.len(),
        out.display()
    );
    Ok(())
}
