//! Foreground extraction geometry: masking, cropping and the tongue rim band.
//!
//! The detector and segmenter themselves live outside this crate. They are
//! reached through [`Detector`] and [`Segmenter`]; [`SidecarAdapter`] reads
//! precomputed results from files next to each image and [`CommandAdapter`]
//! shells out to an external program that produces the same files.

use std::path::{Path, PathBuf};
use std::process::Command;

use image::{DynamicImage, GenericImageView};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

pub use crate::data::BoundingBox;
use crate::data::{
    image_to_array, load_mask, resize_mask, resize_pixels, ImageSample, Normalization, PatchGrid,
};
use crate::error::{Error, Result};

/// Binary foreground mask with a cached pixel count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TongueMask {
    bits: Array2<bool>,
    area: usize,
}

impl TongueMask {
    pub fn new(bits: Array2<bool>) -> Self {
        let area = bits.iter().filter(|&&b| b).count();
        TongueMask { bits, area }
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn into_bits(self) -> Array2<bool> {
        self.bits
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn dim(&self) -> (usize, usize) {
        self.bits.dim()
    }

    /// Tight box around the foreground, `None` when the mask is empty.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for ((y, x), &b) in self.bits.indexed_iter() {
            if b {
                bb = Some(match bb {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        bb.map(|(x0, y0, x1, y1)| BoundingBox {
            x_min: x0,
            y_min: y0,
            x_max: x1 + 1,
            y_max: y1 + 1,
        })
    }
}

/// Rim of a mask: foreground pixels within `band_width` of the background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeBand {
    pub bits: Array2<bool>,
    pub band_width: usize,
}

impl EdgeBand {
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

pub trait Detector {
    fn detect(&self, path: &Path, image: &DynamicImage) -> Result<Detection>;
}

pub trait Segmenter {
    fn segment(
        &self,
        path: &Path,
        image: &DynamicImage,
        prompt: &BoundingBox,
    ) -> Result<TongueMask>;
}

/// Replaces every pixel outside the mask with `fill`.
pub fn apply_mask(pixels: &Array3<f32>, mask: &TongueMask, fill: f32) -> Result<Array3<f32>> {
    let (h, w, _) = pixels.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dim()
        )));
    }
    if mask.area() == 0 {
        return Err(Error::EmptyMask);
    }
    let mut out = pixels.clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        if !mask.bits[[y, x]] {
            *v = fill;
        }
    }
    Ok(out)
}

/// Tight mask box grown by `margin` on every side and clipped to the image.
pub fn crop_box(mask: &TongueMask, margin: usize) -> Result<BoundingBox> {
    let (h, w) = mask.dim();
    let tight = mask.bounding_box().ok_or(Error::EmptyMask)?;
    Ok(BoundingBox {
        x_min: tight.x_min.saturating_sub(margin),
        y_min: tight.y_min.saturating_sub(margin),
        x_max: (tight.x_max + margin).min(w),
        y_max: (tight.y_max + margin).min(h),
    })
}

/// Crops pixels and mask identically to the mask's margin-grown bounding box.
pub fn crop_to_mask(
    pixels: &Array3<f32>,
    mask: &TongueMask,
    margin: usize,
) -> Result<(Array3<f32>, TongueMask, BoundingBox)> {
    let (h, w, _) = pixels.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dim()
        )));
    }
    let b = crop_box(mask, margin)?;
    let px = pixels
        .slice(s![b.y_min..b.y_max, b.x_min..b.x_max, ..])
        .to_owned();
    let m = mask
        .bits
        .slice(s![b.y_min..b.y_max, b.x_min..b.x_max])
        .to_owned();
    Ok((px, TongueMask::new(m), b))
}

/// Binary erosion with a `(2k+1)^2` square element. Pixels outside the image count as background.
pub fn erode(mask: &Array2<bool>, k: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    if k == 0 {
        return mask.clone();
    }
    // Window-all via prefix counts, rows then columns.
    let mut rows = Array2::from_elem((h, w), false);
    for y in 0..h {
        let mut prefix = vec![0usize; w + 1];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + mask[[y, x]] as usize;
        }
        for x in k..w.saturating_sub(k) {
            rows[[y, x]] = prefix[x + k + 1] - prefix[x - k] == 2 * k + 1;
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for x in 0..w {
        let mut prefix = vec![0usize; h + 1];
        for y in 0..h {
            prefix[y + 1] = prefix[y] + rows[[y, x]] as usize;
        }
        for y in k..h.saturating_sub(k) {
            out[[y, x]] = prefix[y + k + 1] - prefix[y - k] == 2 * k + 1;
        }
    }
    out
}

/// `mask AND NOT erode(mask, k)`.
pub fn edge_band(mask: &TongueMask, k: usize) -> Result<EdgeBand> {
    if mask.area() == 0 {
        return Err(Error::EmptyMask);
    }
    if k == 0 {
        return Err(Error::invalid(
            "extraction.band_width",
            "must be at least 1",
        ));
    }
    let eroded = erode(&mask.bits, k);
    let mut bits = mask.bits.clone();
    bits.zip_mut_with(&eroded, |b, &e| *b = *b && !e);
    Ok(EdgeBand {
        bits,
        band_width: k,
    })
}

/// Marks each patch whose band coverage is nonzero and at least `overlap_threshold` of its area.
pub fn patch_edge_mask(
    band: &EdgeBand,
    grid: &PatchGrid,
    overlap_threshold: f64,
) -> Result<Vec<bool>> {
    let (h, w) = band.bits.dim();
    if (h, w) != (grid.height(), grid.width()) {
        return Err(Error::Shape(format!(
            "band {h}x{w} does not match {}x{} patch grid",
            grid.height(),
            grid.width()
        )));
    }
    let mut counts = vec![0usize; grid.count()];
    for ((y, x), &b) in band.bits.indexed_iter() {
        if b {
            counts[grid.index_at(y, x)?] += 1;
        }
    }
    let cell = (grid.patch_size * grid.patch_size) as f64;
    Ok(counts
        .into_iter()
        .map(|c| c > 0 && c as f64 / cell >= overlap_threshold)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSettings {
    /// Rim band width in pixels at the model input resolution.
    pub band_width: usize,
    pub overlap_threshold: f64,
    /// Pixels added around the mask's bounding box before cropping.
    pub margin: usize,
    pub confidence_floor: f64,
}

impl Default for ExtractionSettings {
    fn default() -> Self {
        ExtractionSettings {
            band_width: 12,
            overlap_threshold: 0.25,
            margin: 8,
            confidence_floor: 0.5,
        }
    }
}

impl ExtractionSettings {
    pub fn validate(&self) -> Result<()> {
        if self.band_width == 0 {
            return Err(Error::invalid(
                "extraction.band_width",
                "must be at least 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(Error::invalid(
                "extraction.overlap_threshold",
                "must lie in [0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::invalid(
                "extraction.confidence_floor",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Patch-level rim mask for a sample that carries a foreground mask.
pub fn sample_edge_mask(
    sample: &ImageSample,
    patch_size: usize,
    settings: &ExtractionSettings,
) -> Result<Vec<bool>> {
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::MissingMask(sample.source_path.clone()))?;
    let grid = PatchGrid::new(sample.height(), sample.width(), patch_size)?;
    let band = edge_band(&TongueMask::new(mask.clone()), settings.band_width)?;
    patch_edge_mask(&band, &grid, settings.overlap_threshold)
}

/// Background-free crop in normalized space, before resizing.
#[derive(Debug, Clone)]
pub struct ExtractedCrop {
    pub pixels: Array3<f32>,
    pub mask: TongueMask,
    /// Crop window in source-image coordinates.
    pub crop_box: BoundingBox,
    pub detection: Detection,
    pub source_size: (usize, usize),
}

impl ExtractedCrop {
    /// 8-bit RGB rendering; the background comes out as the normalization mean colour.
    pub fn to_rgb(&self, normalization: &Normalization) -> image::RgbImage {
        let mut px = self.pixels.clone();
        normalization.invert(&mut px);
        let (h, w, c) = px.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let get = |ch: usize| {
                let v = px[[y as usize, x as usize, ch.min(c - 1)]];
                (v * 255.0).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([get(0), get(1), get(2)])
        })
    }
}

/// Detect, segment with the box as prompt, mask out the background and crop.
pub fn extract_crop(
    path: &Path,
    image: &DynamicImage,
    detector: &dyn Detector,
    segmenter: &dyn Segmenter,
    settings: &ExtractionSettings,
    normalization: &Normalization,
) -> Result<ExtractedCrop> {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let detection = detector.detect(path, image)?;
    if detection.confidence < settings.confidence_floor {
        return Err(Error::NoDetection {
            confidence: detection.confidence,
            floor: settings.confidence_floor,
        });
    }
    if !detection.bbox.fits_within(w, h) {
        return Err(Error::Adapter(format!(
            "detector box {:?} exceeds {w}x{h} image",
            detection.bbox
        )));
    }
    let mask = segmenter.segment(path, image, &detection.bbox)?;
    if mask.dim() != (h, w) {
        return Err(Error::Adapter(format!(
            "segmenter mask {:?} does not match {w}x{h} image",
            mask.dim()
        )));
    }
    if mask.area() == 0 {
        return Err(Error::EmptyMask);
    }
    let mut pixels = image_to_array(image);
    normalization.apply(&mut pixels);
    let masked = apply_mask(&pixels, &mask, 0.0)?;
    let (pixels, mask, crop_box) = crop_to_mask(&masked, &mask, settings.margin)?;
    Ok(ExtractedCrop {
        pixels,
        mask,
        crop_box,
        detection,
        source_size: (h, w),
    })
}

/// Full stage-one transform producing a model-ready sample.
pub fn extract_pipeline(
    path: &Path,
    image: &DynamicImage,
    detector: &dyn Detector,
    segmenter: &dyn Segmenter,
    settings: &ExtractionSettings,
    target_size: (usize, usize),
    normalization: &Normalization,
    label: u8,
) -> Result<ImageSample> {
    let crop = extract_crop(path, image, detector, segmenter, settings, normalization)?;
    let (ch, cw, _) = crop.pixels.dim();
    let pixels = resize_pixels(&crop.pixels, target_size.0, target_size.1);
    let mask = resize_mask(crop.mask.bits(), target_size.0, target_size.1);
    let mut sample = ImageSample::new(crate::data::sample_id(path), pixels, label, Some(mask))?;
    sample.source_path = path.to_path_buf();
    sample.original_size = (ch, cw);
    Ok(sample)
}

/// Sidecar paths for `dir/name.ext`: `dir/name.box.txt` and `dir/name.mask.png`.
pub fn sidecar_paths(image_path: &Path) -> (PathBuf, PathBuf) {
    let stem = crate::data::sample_id(image_path);
    let dir = image_path.parent().unwrap_or(Path::new(""));
    (
        dir.join(format!("{stem}.box.txt")),
        dir.join(format!("{stem}.mask.png")),
    )
}

/// Parses `x_min y_min x_max y_max confidence`.
pub fn parse_box_file(text: &str) -> Result<Detection> {
    let fields: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Adapter(format!("box file: {e}")))?;
    if fields.len() != 5 {
        return Err(Error::Adapter(format!(
            "box file: expected 5 numbers, got {}",
            fields.len()
        )));
    }
    if fields.iter().any(|v| !v.is_finite()) || fields[..4].iter().any(|&v| v < 0.0) {
        return Err(Error::Adapter("box file: invalid coordinates".into()));
    }
    let bbox = BoundingBox::new(
        fields[0].floor() as usize,
        fields[1].floor() as usize,
        fields[2].ceil() as usize,
        fields[3].ceil() as usize,
    )?;
    Ok(Detection {
        bbox,
        confidence: fields[4],
    })
}

/// Reads precomputed detector and segmenter outputs stored beside each image.
#[derive(Debug, Clone, Copy, Default)]
pub struct SidecarAdapter;

impl Detector for SidecarAdapter {
    fn detect(&self, path: &Path, _image: &DynamicImage) -> Result<Detection> {
        let (box_path, _) = sidecar_paths(path);
        let text = std::fs::read_to_string(&box_path).map_err(|e| Error::io(&box_path, e))?;
        parse_box_file(&text)
    }
}

impl Segmenter for SidecarAdapter {
    fn segment(
        &self,
        path: &Path,
        _image: &DynamicImage,
        _prompt: &BoundingBox,
    ) -> Result<TongueMask> {
        let (_, mask_path) = sidecar_paths(path);
        Ok(TongueMask::new(load_mask(&mask_path)?))
    }
}

/// Runs `program [args..] <image> <out_prefix>`; the program must write
/// `<out_prefix>.box.txt` and `<out_prefix>.mask.png`.
#[derive(Debug, Clone)]
pub struct CommandAdapter {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub work_dir: PathBuf,
}

impl CommandAdapter {
    fn run(&self, path: &Path) -> Result<(PathBuf, PathBuf)> {
        let stem = crate::data::sample_id(path);
        let prefix = self.work_dir.join(&stem);
        let box_path = self.work_dir.join(format!("{stem}.box.txt"));
        let mask_path = self.work_dir.join(format!("{stem}.mask.png"));
        if box_path.exists() && mask_path.exists() {
            return Ok((box_path, mask_path));
        }
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(path)
            .arg(&prefix)
            .status()
            .map_err(|e| Error::Adapter(format!("{}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Adapter(format!(
                "{} exited with {status}",
                self.program.display()
            )));
        }
        Ok((box_path, mask_path))
    }
}

impl Detector for CommandAdapter {
    fn detect(&self, path: &Path, _image: &DynamicImage) -> Result<Detection> {
        let (box_path, _) = self.run(path)?;
        let text = std::fs::read_to_string(&box_path).map_err(|e| Error::io(&box_path, e))?;
        parse_box_file(&text)
    }
}

impl Segmenter for CommandAdapter {
    fn segment(
        &self,
        path: &Path,
        _image: &DynamicImage,
        _prompt: &BoundingBox,
    ) -> Result<TongueMask> {
        let (_, mask_path) = self.run(path)?;
        Ok(TongueMask::new(load_mask(&mask_path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square_mask(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> TongueMask {
        TongueMask::new(Array2::from_shape_fn((h, w), |(y, x)| {
            y >= y0 && y < y1 && x >= x0 && x < x1
        }))
    }

    /// Direct definition of erosion: every pixel of the window is inside the image and set.
    fn erode_oracle(mask: &Array2<bool>, k: usize) -> Array2<bool> {
        let (h, w) = mask.dim();
        let k = k as isize;
        Array2::from_shape_fn((h, w), |(y, x)| {
            (-k..=k).all(|dy| {
                (-k..=k).all(|dx| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    yy >= 0
                        && xx >= 0
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && mask[[yy as usize, xx as usize]]
                })
            })
        })
    }

    fn blob(h: usize, w: usize, seed: u64) -> TongueMask {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(1.0..h as f64 / 2.0 + 1.0);
        let rx = rng.random_range(1.0..w as f64 / 2.0 + 1.0);
        let mut bits = Array2::from_shape_fn((h, w), |(y, x)| {
            ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0
        });
        let iy = (cy as usize).min(h - 1);
        let ix = (cx as usize).min(w - 1);
        bits[[iy, ix]] = true;
        TongueMask::new(bits)
    }

    #[test]
    fn all_true_mask_is_identity() {
        let px = Array3::from_shape_fn((4, 5, 3), |(y, x, c)| (y * 15 + x * 3 + c) as f32);
        let m = TongueMask::new(Array2::from_elem((4, 5), true));
        assert_eq!(apply_mask(&px, &m, 0.0).unwrap(), px);
    }

    #[test]
    fn all_false_mask_is_error() {
        let px = Array3::zeros((4, 5, 3));
        let m = TongueMask::new(Array2::from_elem((4, 5), false));
        assert_eq!(
            apply_mask(&px, &m, 0.0).unwrap_err().to_string(),
            "empty mask"
        );
    }

    #[test]
    fn inner_square_keeps_nine_pixels() {
        let px = Array3::from_elem((5, 5, 1), 7.0f32);
        let m = square_mask(5, 5, 1, 4, 1, 4);
        let out = apply_mask(&px, &m, -1.0).unwrap();
        let mut kept = 0;
        let mut filled = 0;
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..4).contains(&y) && (1..4).contains(&x);
                if inside {
                    assert_eq!(out[[y, x, 0]], 7.0);
                    kept += 1;
                } else {
                    assert_eq!(out[[y, x, 0]], -1.0);
                    filled += 1;
                }
            }
        }
        assert_eq!((kept, filled), (9, 16));
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let px = Array3::zeros((4, 5, 3));
        let m = TongueMask::new(Array2::from_elem((5, 4), true));
        assert!(matches!(apply_mask(&px, &m, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn crop_examples() {
        let px = Array3::zeros((5, 5, 3));
        let m = square_mask(5, 5, 2, 5, 1, 4);
        let (c, cm, b) = crop_to_mask(&px, &m, 0).unwrap();
        assert_eq!(c.dim(), (3, 3, 3));
        assert_eq!(cm.area(), 9);
        assert_eq!(b, BoundingBox::new(1, 2, 4, 5).unwrap());
        let (c, _, _) = crop_to_mask(&px, &m, 10).unwrap();
        assert_eq!(c.dim(), (5, 5, 3));
        let empty = TongueMask::new(Array2::from_elem((5, 5), false));
        assert!(crop_to_mask(&px, &empty, 0).is_err());
    }

    #[test]
    fn band_of_solid_square_is_perimeter() {
        let m = TongueMask::new(Array2::from_elem((5, 5), true));
        let band = edge_band(&m, 1).unwrap();
        assert_eq!(band.area(), 16);
        assert!(!band.bits[[2, 2]]);
        let expected = Array2::from_shape_fn((5, 5), |(y, x)| y == 0 || y == 4 || x == 0 || x == 4);
        assert_eq!(band.bits, expected);
    }

    #[test]
    fn thin_line_band_is_whole_mask() {
        let m = square_mask(9, 9, 4, 5, 1, 8);
        assert_eq!(edge_band(&m, 1).unwrap().bits, *m.bits());
    }

    #[test]
    fn huge_band_is_whole_mask() {
        let m = blob(20, 17, 4);
        assert_eq!(edge_band(&m, 20).unwrap().bits, *m.bits());
    }

    #[test]
    fn patch_edge_mask_examples() {
        let grid = PatchGrid::new(32, 32, 16).unwrap();
        let full = EdgeBand {
            bits: Array2::from_elem((32, 32), true),
            band_width: 1,
        };
        assert!(patch_edge_mask(&full, &grid, 1.0)
            .unwrap()
            .iter()
            .all(|&b| b));
        let empty = EdgeBand {
            bits: Array2::from_elem((32, 32), false),
            band_width: 1,
        };
        assert!(patch_edge_mask(&empty, &grid, 0.25)
            .unwrap()
            .iter()
            .all(|&b| !b));
        // Left half of patch 3 (rows 16..32, cols 16..24): 128 of 256 pixels.
        let half = EdgeBand {
            bits: Array2::from_shape_fn((32, 32), |(y, x)| y >= 16 && (16..24).contains(&x)),
            band_width: 1,
        };
        assert_eq!(
            patch_edge_mask(&half, &grid, 0.25).unwrap(),
            vec![false, false, false, true]
        );
        let bad = EdgeBand {
            bits: Array2::from_elem((30, 32), true),
            band_width: 1,
        };
        assert!(patch_edge_mask(&bad, &grid, 0.25).is_err());
    }

    struct FixedDetector(Detection);
    impl Detector for FixedDetector {
        fn detect(&self, _: &Path, _: &DynamicImage) -> Result<Detection> {
            Ok(self.0)
        }
    }
    struct FixedSegmenter(TongueMask);
    impl Segmenter for FixedSegmenter {
        fn segment(&self, _: &Path, _: &DynamicImage, _: &BoundingBox) -> Result<TongueMask> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn pipeline_crop_is_bounded_by_disk() {
        let (w, h) = (80usize, 60usize);
        let img = DynamicImage::ImageRgb8(image::RgbImage::from_pixel(
            w as u32,
            h as u32,
            image::Rgb([200, 100, 100]),
        ));
        let disk = TongueMask::new(Array2::from_shape_fn((h, w), |(y, x)| {
            (y as f64 - 30.0).powi(2) + (x as f64 - 40.0).powi(2) <= 100.0
        }));
        let tight = disk.bounding_box().unwrap();
        let det = FixedDetector(Detection {
            bbox: BoundingBox::new(0, 0, w, h).unwrap(),
            confidence: 0.9,
        });
        let settings = ExtractionSettings {
            margin: 3,
            ..Default::default()
        };
        let crop = extract_crop(
            Path::new("x.png"),
            &img,
            &det,
            &FixedSegmenter(disk.clone()),
            &settings,
            &Normalization::default(),
        )
        .unwrap();
        assert_eq!(crop.crop_box.x_min, tight.x_min - 3);
        assert_eq!(crop.crop_box.y_max, tight.y_max + 3);
        assert_eq!(crop.mask.area(), disk.area());
        let sample = extract_pipeline(
            Path::new("x.png"),
            &img,
            &det,
            &FixedSegmenter(disk),
            &settings,
            (32, 32),
            &Normalization::default(),
            1,
        )
        .unwrap();
        assert_eq!(sample.pixels.dim(), (32, 32, 3));
        assert_eq!(
            sample.original_size,
            (tight.height() + 6, tight.width() + 6)
        );
        // Corners fall outside the disk and carry the zero fill.
        assert!(sample.pixels.slice(s![0, 0, ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn low_confidence_is_rejected() {
        let img = DynamicImage::ImageRgb8(image::RgbImage::new(8, 8));
        let det = FixedDetector(Detection {
            bbox: BoundingBox::new(0, 0, 8, 8).unwrap(),
            confidence: 0.1,
        });
        let seg = FixedSegmenter(TongueMask::new(Array2::from_elem((8, 8), true)));
        let err = extract_crop(
            Path::new("x.png"),
            &img,
            &det,
            &seg,
            &ExtractionSettings::default(),
            &Normalization::default(),
        )
        .unwrap_err();
        assert!(err.to_string().starts_with("no tongue detected"));
    }

    #[test]
    fn identity_stubs_return_resized_input() {
        let img = image::RgbImage::from_fn(32, 32, |x, y| {
            image::Rgb([(x * 8) as u8, (y * 8) as u8, 50])
        });
        let dynimg = DynamicImage::ImageRgb8(img);
        let det = FixedDetector(Detection {
            bbox: BoundingBox::new(0, 0, 32, 32).unwrap(),
            confidence: 1.0,
        });
        let seg = FixedSegmenter(TongueMask::new(Array2::from_elem((32, 32), true)));
        let norm = Normalization::identity();
        let s = extract_pipeline(
            Path::new("x.png"),
            &dynimg,
            &det,
            &seg,
            &ExtractionSettings {
                margin: 0,
                ..Default::default()
            },
            (16, 16),
            &norm,
            0,
        )
        .unwrap();
        let direct = resize_pixels(&image_to_array(&dynimg), 16, 16);
        let diff = (&s.pixels - &direct)
            .mapv(f32::abs)
            .fold(0.0f32, |a, &b| a.max(b));
        assert!(diff < 1e-6);
    }

    #[test]
    fn sidecar_adapter_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("face.jpg");
        let (box_path, mask_path) = sidecar_paths(&img_path);
        assert_eq!(box_path, dir.path().join("face.box.txt"));
        std::fs::write(&box_path, "1 2 7 8 0.93\n").unwrap();
        crate::data::mask_to_image(&Array2::from_elem((10, 10), true))
            .save(&mask_path)
            .unwrap();
        let img = DynamicImage::ImageRgb8(image::RgbImage::new(10, 10));
        let d = SidecarAdapter.detect(&img_path, &img).unwrap();
        assert_eq!(d.bbox, BoundingBox::new(1, 2, 7, 8).unwrap());
        assert!((d.confidence - 0.93).abs() < 1e-12);
        let m = SidecarAdapter.segment(&img_path, &img, &d.bbox).unwrap();
        assert_eq!(m.area(), 100);
        assert!(parse_box_file("1 2 3").is_err());
        assert!(parse_box_file("5 2 3 4 0.9").is_err());
    }

    proptest! {
        #[test]
        fn erosion_matches_definition(h in 1usize..14, w in 1usize..14, k in 1usize..5, seed in any::<u64>()) {
            let m = blob(h, w, seed);
            prop_assert_eq!(erode(m.bits(), k), erode_oracle(m.bits(), k));
        }

        #[test]
        fn band_is_subset_and_monotone(seed in any::<u64>(), k1 in 1usize..6, dk in 0usize..6) {
            let m = blob(24, 20, seed);
            let b1 = edge_band(&m, k1).unwrap();
            let b2 = edge_band(&m, k1 + dk).unwrap();
            for ((y, x), &b) in b1.bits.indexed_iter() {
                prop_assert!(!b || m.bits()[[y, x]]);
                prop_assert!(!b || b2.bits[[y, x]]);
            }
        }

        #[test]
        fn apply_mask_idempotent(seed in any::<u64>()) {
            let m = blob(12, 9, seed);
            let px = Array3::from_shape_fn((12, 9, 3), |(y, x, c)| (y * 31 + x * 7 + c) as f32);
            let once = apply_mask(&px, &m, 0.0).unwrap();
            prop_assert_eq!(apply_mask(&once, &m, 0.0).unwrap(), once);
        }

        #[test]
        fn zero_threshold_marks_intersecting_patches(seed in any::<u64>(), k in 1usize..4) {
            let m = blob(32, 48, seed);
            let band = edge_band(&m, k).unwrap();
            let grid = PatchGrid::new(32, 48, 8).unwrap();
            let marks = patch_edge_mask(&band, &grid, 0.0).unwrap();
            for i in 0..grid.count() {
                let b = grid.patch_box(i).unwrap();
                let hit = (b.y_min..b.y_max).any(|y| (b.x_min..b.x_max).any(|x| band.bits[[y, x]]));
                prop_assert_eq!(marks[i], hit);
            }
        }
    }
}
