//! Domain types shared across the crate and CSV manifest ingestion.
//!
//! A manifest is a UTF-8 CSV file with the exact header `path,label,mask_path`.
//! Relative paths are resolved against the directory holding the manifest.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 3] = ["path", "label", "mask_path"];

/// Foreground threshold for 8-bit masks.
pub const MASK_THRESHOLD: u8 = 128;

/// Axis-aligned pixel box, half-open `[min, max)` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::invalid(
                "bounding box",
                format!("degenerate box ({x_min},{y_min},{x_max},{y_max})"),
            ));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }
}

/// Non-overlapping square patch layout over an `H x W` image, indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "cannot tile {height}x{width} with patch size {patch_size}"
            )));
        }
        if !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(Error::Shape(format!(
                "patch size {patch_size} does not divide {height}x{width}"
            )));
        }
        Ok(PatchGrid {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
        })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }

    pub fn patch_box(&self, index: usize) -> Result<BoundingBox> {
        if index >= self.count() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.count(),
            });
        }
        let (row, col) = (index / self.cols, index % self.cols);
        let p = self.patch_size;
        Ok(BoundingBox {
            x_min: col * p,
            y_min: row * p,
            x_max: (col + 1) * p,
            y_max: (row + 1) * p,
        })
    }

    /// Patch index containing pixel `(y, x)`.
    pub fn index_at(&self, y: usize, x: usize) -> Result<usize> {
        if y >= self.height() || x >= self.width() {
            return Err(Error::Shape(format!(
                "pixel ({y},{x}) outside {}x{} grid",
                self.height(),
                self.width()
            )));
        }
        Ok((y / self.patch_size) * self.cols + x / self.patch_size)
    }
}

/// Per-channel affine normalization `(x - mean) / std` on `[0, 1]` intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet channel statistics used by the pretrained ViT backbones.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Statistics of one `[0, 1]` image, mostly useful for sanity checks.
    pub fn from_pixels(pixels: &Array3<f32>) -> Self {
        let mut out = Normalization::identity();
        let channels = pixels.dim().2.min(3);
        for c in 0..channels {
            let lane = pixels.index_axis(ndarray::Axis(2), c);
            let n = lane.len() as f64;
            let mean = lane.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = lane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            out.mean[c] = mean as f32;
            out.std[c] = var.sqrt().max(1e-6) as f32;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("data.normalization.std", "must be positive"));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("data.normalization.mean", "must be finite"));
        }
        Ok(())
    }

    pub fn apply(&self, pixels: &mut Array3<f32>) {
        for ((_, _, c), v) in pixels.indexed_iter_mut() {
            *v = (*v - self.mean[c]) / self.std[c];
        }
    }

    pub fn invert(&self, pixels: &mut Array3<f32>) {
        for ((_, _, c), v) in pixels.indexed_iter_mut() {
            *v = *v * self.std[c] + self.mean[c];
        }
    }

    /// Raw 8-bit colour that normalizes to exactly zero.
    pub fn zero_color(&self) -> [u8; 3] {
        self.mean
            .map(|m| (m * 255.0).round().clamp(0.0, 255.0) as u8)
    }
}

/// One resized, normalized image with its image-level label.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// `H x W x C` normalized intensities.
    pub pixels: Array3<f32>,
    pub label: u8,
    pub mask: Option<Array2<bool>>,
    pub source_path: PathBuf,
    /// `(height, width)` of the decoded source before resizing.
    pub original_size: (usize, usize),
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        pixels: Array3<f32>,
        label: u8,
        mask: Option<Array2<bool>>,
    ) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape("image has zero extent".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("expected 1 or 3 channels, got {c}")));
        }
        if label > 1 {
            return Err(Error::InvalidLabel(label));
        }
        if let Some(m) = &mask {
            if m.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "mask {:?} does not match image {h}x{w}",
                    m.dim()
                )));
            }
        }
        Ok(ImageSample {
            id: id.into(),
            pixels,
            label,
            mask,
            source_path: PathBuf::new(),
            original_size: (h, w),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
    pub mask_path: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        sample_id(&self.path)
    }
}

/// Identifier derived from a file name: the stem without extension.
pub fn sample_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    /// `(n_negative, n_positive)`
    class_counts: (usize, usize),
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut seen = HashSet::new();
        let mut counts = (0, 0);
        for (i, e) in entries.iter().enumerate() {
            if e.label > 1 {
                return Err(Error::ManifestRow {
                    row: i + 1,
                    reason: format!("label {} outside {{0,1}}", e.label),
                });
            }
            if !seen.insert(e.path.clone()) {
                return Err(Error::ManifestRow {
                    row: i + 1,
                    reason: format!("duplicate path {}", e.path.display()),
                });
            }
            if e.label == 1 {
                counts.1 += 1;
            } else {
                counts.0 += 1;
            }
        }
        Ok(DatasetManifest {
            entries,
            class_counts: counts,
        })
    }

    /// Reads a manifest. Row numbers in errors count data rows from 1.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::ManifestRow {
            row: 0,
            reason: e.to_string(),
        })?;
        if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
            return Err(Error::ManifestRow {
                row: 0,
                reason: format!("header must be `{}`", MANIFEST_HEADER.join(",")),
            });
        }
        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| Error::ManifestRow {
                row,
                reason: e.to_string(),
            })?;
            if record.len() < 2 || record.len() > 3 {
                return Err(Error::ManifestRow {
                    row,
                    reason: format!("expected 2 or 3 fields, got {}", record.len()),
                });
            }
            let raw_path = record[0].trim();
            if raw_path.is_empty() {
                return Err(Error::ManifestRow {
                    row,
                    reason: "empty path".into(),
                });
            }
            let label: u8 = match record[1].trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::ManifestRow {
                        row,
                        reason: format!("label `{other}` outside {{0,1}}"),
                    })
                }
            };
            let mask_path = record
                .get(2)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| base.join(s));
            entries.push(ManifestEntry {
                path: base.join(raw_path),
                label,
                mask_path,
            });
        }
        Self::from_entries(entries)
    }

    /// Writes the manifest; paths under the output directory are stored relative to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut writer = csv::Writer::from_writer(Vec::new());
        let rel = |p: &Path| -> String {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;
        for e in &self.entries {
            let mask = e.mask_path.as_deref().map(rel).unwrap_or_default();
            writer
                .write_record([rel(&e.path), e.label.to_string(), mask])
                .map_err(csv_err)?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// `(n_negative, n_positive)`
    pub fn class_counts(&self) -> (usize, usize) {
        self.class_counts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

pub(crate) fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))
}

/// `[0, 1]` RGB intensities; single-channel sources are replicated across all three channels.
pub fn image_to_array(img: &DynamicImage) -> Array3<f32> {
    let rgb = img.to_rgb32f();
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c]
    })
}

/// Bilinear resize (pixel-centre aligned) of a float image in any intensity space.
pub fn resize_pixels(pixels: &Array3<f32>, height: usize, width: usize) -> Array3<f32> {
    let (h, w, c) = pixels.dim();
    if (h, w) == (height, width) {
        return pixels.clone();
    }
    let mut out = Array3::zeros((height, width, c));
    let sy = h as f32 / height as f32;
    let sx = w as f32 / width as f32;
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let top = pixels[[y0, x0, ch]] * (1.0 - tx) + pixels[[y0, x1, ch]] * tx;
                let bottom = pixels[[y1, x0, ch]] * (1.0 - tx) + pixels[[y1, x1, ch]] * tx;
                out[[y, x, ch]] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Nearest-neighbour resize of a binary mask.
pub fn resize_mask(mask: &Array2<bool>, height: usize, width: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    if (h, w) == (height, width) {
        return mask.clone();
    }
    Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / height as f64) as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / width as f64) as usize;
        mask[[sy.min(h - 1), sx.min(w - 1)]]
    })
}

pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    if !path.exists() {
        return Err(Error::MissingMask(path.to_path_buf()));
    }
    let luma = open_image(path)?.to_luma8();
    let (w, h) = luma.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        luma.get_pixel(x as u32, y as u32)[0] >= MASK_THRESHOLD
    }))
}

pub fn mask_to_image(mask: &Array2<bool>) -> image::GrayImage {
    let (h, w) = mask.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] {
            255
        } else {
            0
        }])
    })
}

/// Decodes, resizes to `target_size = (H, W)` and normalizes one manifest entry.
pub fn load_sample(
    entry: &ManifestEntry,
    target_size: (usize, usize),
    normalization: &Normalization,
) -> Result<ImageSample> {
    let img = open_image(&entry.path)?;
    let (w, h) = img.dimensions();
    let (th, tw) = target_size;
    let resized = if (h as usize, w as usize) == target_size {
        img
    } else {
        img.resize_exact(tw as u32, th as u32, FilterType::Triangle)
    };
    let mut pixels = image_to_array(&resized);
    normalization.apply(&mut pixels);
    let mask = match &entry.mask_path {
        Some(p) => Some(resize_mask(&load_mask(p)?, th, tw)),
        None => None,
    };
    let mut sample = ImageSample::new(entry.id(), pixels, entry.label, mask)?;
    sample.source_path = entry.path.clone();
    sample.original_size = (h as usize, w as usize);
    Ok(sample)
}

/// Loads every entry, decoding in parallel. Order follows the manifest.
pub fn load_all(
    manifest: &DatasetManifest,
    target_size: (usize, usize),
    normalization: &Normalization,
) -> Result<Vec<ImageSample>> {
    use rayon::prelude::*;
    manifest
        .entries()
        .par_iter()
        .map(|e| load_sample(e, target_size, normalization))
        .collect()
}
