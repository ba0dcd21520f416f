//! Planted-patch dataset generator.
//!
//! Each image is a textured blob on a flat background. Positive images carry
//! one to three dark square marks, each inside a single patch cell and inside
//! the blob's rim band. Ground truth lists the patch indices that hold marks.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    image_to_array, mask_to_image, DatasetManifest, ImageSample, ManifestEntry, Normalization,
    PatchGrid,
};
use crate::error::{Error, Result};
use crate::extraction::{edge_band, patch_edge_mask, TongueMask};

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub count: usize,
    pub positive_fraction: f64,
    pub min_marks: usize,
    pub max_marks: usize,
    /// Side of a mark square in pixels.
    pub mark_size: usize,
    /// Rim width used to place marks.
    pub band_width: usize,
    pub overlap_threshold: f64,
    /// Per-pixel texture amplitude on the blob, in 8-bit levels.
    pub texture: f64,
    /// Relative amplitude of the blob outline ripple.
    pub ripple: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            patch_size: 16,
            count: 400,
            positive_fraction: 0.5,
            min_marks: 1,
            max_marks: 3,
            mark_size: 8,
            band_width: 12,
            overlap_threshold: 0.25,
            texture: 14.0,
            ripple: 0.06,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(
                "synthetic.image_size",
                "must be a positive multiple of patch_size",
            ));
        }
        if self.image_size < 2 * self.patch_size {
            return Err(Error::invalid(
                "synthetic.image_size",
                "needs at least a 2x2 patch grid",
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::invalid(
                "synthetic.positive_fraction",
                "must lie in [0, 1]",
            ));
        }
        if self.min_marks == 0 || self.min_marks > self.max_marks {
            return Err(Error::invalid(
                "synthetic.min_marks",
                "need 1 <= min_marks <= max_marks",
            ));
        }
        if self.mark_size == 0 || self.mark_size > self.patch_size {
            return Err(Error::invalid(
                "synthetic.mark_size",
                "mark must fit inside one patch",
            ));
        }
        if self.mark_size > 2 * self.band_width {
            return Err(Error::invalid(
                "synthetic.mark_size",
                "mark is wider than the rim band",
            ));
        }
        if self.band_width == 0 {
            return Err(Error::invalid("synthetic.band_width", "must be at least 1"));
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        (self.count as f64 * self.positive_fraction).round() as usize
    }
}

/// One generated image before it touches the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub label: u8,
    pub rgb: image::RgbImage,
    pub mask: Array2<bool>,
    pub planted: Vec<usize>,
}

impl SyntheticImage {
    /// Model-ready sample at the generated resolution.
    pub fn to_sample(&self, normalization: &Normalization) -> Result<ImageSample> {
        let mut pixels = image_to_array(&image::DynamicImage::ImageRgb8(self.rgb.clone()));
        normalization.apply(&mut pixels);
        ImageSample::new(self.id.clone(), pixels, self.label, Some(self.mask.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    pub label: u8,
    pub planted_patches: Vec<usize>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

pub fn gt_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.gt.json"))
}

fn blob(size: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let s = size as f64;
    let cy = s / 2.0 + rng.random_range(-0.05..0.05) * s;
    let cx = s / 2.0 + rng.random_range(-0.05..0.05) * s;
    let ry = rng.random_range(0.34..0.43) * s;
    let rx = rng.random_range(0.34..0.43) * s;
    let freq = rng.random_range(3..6) as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    Array2::from_shape_fn((size, size), |(y, x)| {
        let dy = (y as f64 + 0.5 - cy) / ry;
        let dx = (x as f64 + 0.5 - cx) / rx;
        let theta = dy.atan2(dx);
        let limit = 1.0 + spec.ripple * (freq * theta + phase).sin();
        (dy * dy + dx * dx).sqrt() <= limit
    })
}

/// Square positions inside `cell` whose overlap with `allowed` is at least half the square.
fn mark_positions(
    allowed: &Array2<bool>,
    cell: &crate::data::BoundingBox,
    m: usize,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y0 in cell.y_min..=cell.y_max - m {
        for x0 in cell.x_min..=cell.x_max - m {
            let hits = (y0..y0 + m)
                .flat_map(|y| (x0..x0 + m).map(move |x| (y, x)))
                .filter(|&p| allowed[p])
                .count();
            if 2 * hits >= m * m {
                out.push((y0, x0));
            }
        }
    }
    out
}

fn render_one(spec: &SyntheticSpec, seed: u64, index: usize, label: u8) -> Result<SyntheticImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let n = spec.image_size;
    let grid = PatchGrid::new(n, n, spec.patch_size)?;
    let background = Normalization::default().zero_color();
    for _attempt in 0..32 {
        let mask = blob(n, spec, &mut rng);
        let tongue = TongueMask::new(mask.clone());
        let band = edge_band(&tongue, spec.band_width)?;
        let cells = patch_edge_mask(&band, &grid, spec.overlap_threshold)?;
        let allowed = &band.bits;
        let base = [
            rng.random_range(185.0..215.0),
            rng.random_range(95.0..125.0),
            rng.random_range(105.0..135.0),
        ];
        let mut rgb = image::RgbImage::from_fn(n as u32, n as u32, |x, y| {
            if mask[[y as usize, x as usize]] {
                let j: f64 = rng.random_range(-1.0..1.0) * spec.texture;
                image::Rgb(base.map(|b: f64| (b + j).round().clamp(0.0, 255.0) as u8))
            } else {
                image::Rgb(background)
            }
        });
        let mut planted = Vec::new();
        if label == 1 {
            let mut candidates: Vec<usize> = (0..grid.count()).filter(|&i| cells[i]).collect();
            candidates.shuffle(&mut rng);
            let want = rng.random_range(spec.min_marks..=spec.max_marks);
            for cell in candidates {
                if planted.len() == want {
                    break;
                }
                let b = grid.patch_box(cell)?;
                let spots = mark_positions(allowed, &b, spec.mark_size);
                let Some(&(y0, x0)) = spots.choose(&mut rng) else {
                    continue;
                };
                let shade = [
                    rng.random_range(70.0..100.0),
                    rng.random_range(30.0..50.0),
                    rng.random_range(40.0..60.0),
                ];
                for y in y0..y0 + spec.mark_size {
                    for x in x0..x0 + spec.mark_size {
                        if allowed[[y, x]] {
                            let j: f64 = rng.random_range(-1.0..1.0) * spec.texture * 0.5;
                            let px = shade.map(|s: f64| (s + j).round().clamp(0.0, 255.0) as u8);
                            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
                        }
                    }
                }
                planted.push(cell);
            }
            if planted.len() < spec.min_marks {
                continue;
            }
            planted.sort_unstable();
        }
        return Ok(SyntheticImage {
            id: format!("syn{index:05}"),
            label,
            rgb,
            mask,
            planted,
        });
    }
    Err(Error::invalid(
        "synthetic",
        format!(
            "could not place {} marks on the rim of image {index}",
            spec.min_marks
        ),
    ))
}

/// Images in index order. Labels are a seeded permutation with the requested positive count.
pub fn render(spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticImage>> {
    spec.validate()?;
    let mut labels: Vec<u8> = (0..spec.count)
        .map(|i| u8::from(i < spec.positives()))
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..spec.count)
        .into_par_iter()
        .map(|i| render_one(spec, seed, i, labels[i]))
        .collect()
}

/// Writes `<id>.png`, `<id>.mask.png`, `<id>.gt.json` and `manifest.csv` into `dir`.
pub fn generate(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let images = render(spec, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images.par_iter().try_for_each(|im| -> Result<()> {
        let img_path = dir.join(format!("{}.png", im.id));
        im.rgb
            .save_with_format(&img_path, image::ImageFormat::Png)
            .map_err(|e| Error::image(&img_path, e))?;
        let mask_path = dir.join(format!("{}.mask.png", im.id));
        mask_to_image(&im.mask)
            .save_with_format(&mask_path, image::ImageFormat::Png)
            .map_err(|e| Error::image(&mask_path, e))?;
        let gt = GroundTruth {
            id: im.id.clone(),
            label: im.label,
            planted_patches: im.planted.clone(),
        };
        let p = gt_path(dir, &im.id);
        std::fs::write(
            &p,
            serde_json::to_string_pretty(&gt).expect("gt serializes"),
        )
        .map_err(|e| Error::io(&p, e))
    })?;
    let entries = images
        .iter()
        .map(|im| ManifestEntry {
            path: dir.join(format!("{}.png", im.id)),
            label: im.label,
            mask_path: Some(dir.join(format!("{}.mask.png", im.id))),
        })
        .collect();
    let manifest = DatasetManifest::from_entries(entries)?;
    manifest.save(dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
