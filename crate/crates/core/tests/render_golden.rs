use std::path::PathBuf;

use image::{Rgb, RgbImage};
use patchmil::data::{BoundingBox, PatchGrid};
use patchmil::inference::render::save_png;
use patchmil::inference::{draw_boxes, heatmap_overlay, BoxStyle, RolloutMap, ScoredBox};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn canvas() -> RgbImage {
    RgbImage::from_fn(64, 48, |x, y| Rgb([(x * 4) as u8, (y * 5) as u8, 90]))
}

/// Compares against the stored PNG. `PATCHMIL_BLESS=1` rewrites it.
fn assert_golden(img: &RgbImage, name: &str) {
    let path = fixture(name);
    if std::env::var_os("PATCHMIL_BLESS").is_some() {
        save_png(img, &path).unwrap();
    }
    let golden = image::open(&path).unwrap().to_rgb8();
    assert_eq!(golden.dimensions(), img.dimensions());
    let diff = golden
        .pixels()
        .zip(img.pixels())
        .filter(|(a, b)| a != b)
        .count();
    assert_eq!(diff, 0, "{diff} pixels differ from {}", path.display());
}

#[test]
fn boxes_match_golden() {
    let boxes = [
        ScoredBox {
            bbox: BoundingBox::new(16, 16, 32, 32).unwrap(),
            score: 0.87,
            patches: vec![5],
        },
        ScoredBox {
            bbox: BoundingBox::new(40, 2, 60, 20).unwrap(),
            score: 0.5,
            patches: vec![3],
        },
    ];
    assert_golden(
        &draw_boxes(&canvas(), &boxes, &BoxStyle::default()),
        "boxes.png",
    );
}

#[test]
fn heatmap_matches_golden() {
    let grid = PatchGrid::new(48, 64, 16).unwrap();
    let map = RolloutMap {
        values: (0..12).map(|i| i as f64 / 11.0).collect(),
    };
    assert_golden(
        &heatmap_overlay(&canvas(), &map, &grid, 0.5).unwrap(),
        "heatmap.png",
    );
}
