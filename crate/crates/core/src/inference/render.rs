//! Box and heat-map overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::PatchGrid;
use crate::error::{Error, Result};
use crate::inference::detect::ScoredBox;
use crate::inference::rollout::RolloutMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStyle {
    pub color: [u8; 3],
    pub stroke: usize,
    pub captions: bool,
}

impl Default for BoxStyle {
    fn default() -> Self {
        BoxStyle {
            color: [255, 32, 32],
            stroke: 2,
            captions: true,
        }
    }
}

/// 3x5 glyphs for `0-9` and `.`, one row per byte, high bit on the left.
const GLYPHS: [[u8; 5]; 11] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
    [0b000, 0b000, 0b000, 0b000, 0b010],
];

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x: i64, y: i64, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let glyph = match ch {
            '0'..='9' => GLYPHS[ch as usize - '0' as usize],
            '.' => GLYPHS[10],
            _ => continue,
        };
        for (dy, row) in glyph.iter().enumerate() {
            for dx in 0..3 {
                if row & (0b100 >> dx) != 0 {
                    put(img, cx + dx, y + dy as i64, color);
                }
            }
        }
        cx += 4;
    }
}

/// Copy of `image` with each box outlined by a stroke inside its edges.
pub fn draw_boxes(image: &RgbImage, boxes: &[ScoredBox], style: &BoxStyle) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = (image.width() as usize, image.height() as usize);
    for b in boxes {
        let bb = &b.bbox;
        let (x1, y1) = (bb.x_max.min(w), bb.y_max.min(h));
        for y in bb.y_min..y1 {
            for x in bb.x_min..x1 {
                let s = style.stroke;
                if x < bb.x_min + s || y < bb.y_min + s || x + s >= bb.x_max || y + s >= bb.y_max {
                    out.put_pixel(x as u32, y as u32, Rgb(style.color));
                }
            }
        }
        if style.captions {
            let text = format!("{:.2}", b.score);
            let inset = (style.stroke + 1) as i64;
            let (tx, ty) = if bb.y_min >= 7 {
                (bb.x_min as i64, bb.y_min as i64 - 7)
            } else {
                (bb.x_min as i64 + inset, bb.y_min as i64 + inset)
            };
            draw_text(&mut out, &text, tx, ty, style.color);
        }
    }
    out
}

/// Blue to red ramp through cyan, green and yellow.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blends the map over `image`, one flat cell per patch; pixel opacity is
/// `alpha * value`, so a zero map leaves the image untouched.
pub fn heatmap_overlay(
    image: &RgbImage,
    map: &RolloutMap,
    grid: &PatchGrid,
    alpha: f64,
) -> Result<RgbImage> {
    if map.len() != grid.count() {
        return Err(Error::Shape(format!(
            "{} map values for {} patches",
            map.len(),
            grid.count()
        )));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let r = (y as usize * grid.rows / h).min(grid.rows - 1);
        let c = (x as usize * grid.cols / w).min(grid.cols - 1);
        let v = map.values[r * grid.cols + c];
        let a = (alpha * v).clamp(0.0, 1.0);
        if a == 0.0 {
            continue;
        }
        let col = colormap(v);
        for k in 0..3 {
            px.0[k] = ((1.0 - a) * px.0[k] as f64 + a * col[k] as f64).round() as u8;
        }
    }
    Ok(out)
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}
