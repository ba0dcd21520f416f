//! Bag decision plus rim-restricted patch boxes for one image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, ImageSample, PatchGrid};
use crate::error::{Error, Result};
use crate::extraction::ExtractionSettings;
use crate::inference::merge::merge_adjacent;
use crate::inference::rollout::{attention_rollout, RolloutMap};
use crate::mil::POSITIVE;
use crate::model::{Model, ModelOutput};
use crate::pipeline::evaluate::{decide, patch_mask, DecisionRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSettings {
    /// Patch score needed for a box.
    pub threshold: f64,
    pub decision_rule: DecisionRule,
    pub merge: bool,
    /// Restrict boxes and the masked decision to the rim band.
    pub edge_mask: bool,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            threshold: 0.5,
            decision_rule: DecisionRule::MicmMasked,
            merge: false,
            edge_mask: true,
        }
    }
}

impl InferenceSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("inference.threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    /// Original-crop coordinates.
    pub bbox: BoundingBox,
    pub score: f64,
    /// Patches covered, in model-input grid indices.
    pub patches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub bag_label: u8,
    pub bag_score: f64,
    pub boxes: Vec<ScoredBox>,
    /// Masked positive probability per patch.
    pub patch_scores: Vec<f64>,
    pub selected: Option<usize>,
    pub heatmap: Option<RolloutMap>,
}

#[derive(Serialize, Deserialize)]
struct DetJson {
    bag_label: u8,
    bag_score: f64,
    boxes: Vec<[f64; 5]>,
}

impl DetectionResult {
    pub fn to_json(&self) -> String {
        let doc = DetJson {
            bag_label: self.bag_label,
            bag_score: self.bag_score,
            boxes: self
                .boxes
                .iter()
                .map(|b| {
                    [
                        b.bbox.x_min as f64,
                        b.bbox.y_min as f64,
                        b.bbox.x_max as f64,
                        b.bbox.y_max as f64,
                        b.score,
                    ]
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("detection serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Maps a box on the `input` grid to `original = (H, W)` coordinates, rounding outward.
pub fn map_box(b: &BoundingBox, input: (usize, usize), original: (usize, usize)) -> BoundingBox {
    let sy = original.0 as f64 / input.0 as f64;
    let sx = original.1 as f64 / input.1 as f64;
    let lo = |v: usize, s: f64| (v as f64 * s).floor() as usize;
    let hi = |v: usize, s: f64, max: usize| ((v as f64 * s).ceil() as usize).min(max);
    BoundingBox {
        x_min: lo(b.x_min, sx),
        y_min: lo(b.y_min, sy),
        x_max: hi(b.x_max, sx, original.1),
        y_max: hi(b.y_max, sy, original.0),
    }
}

/// Detection from a finished forward pass. `mask` marks the patches allowed to fire.
pub fn detect_from_output(
    out: &ModelOutput,
    mask: &[bool],
    grid: &PatchGrid,
    original_size: (usize, usize),
    settings: &InferenceSettings,
) -> Result<DetectionResult> {
    let decision = decide(out, mask, settings.decision_rule)?;
    let patch_scores: Vec<f64> = out
        .scores
        .probs
        .column(POSITIVE)
        .iter()
        .zip(mask)
        .map(|(&p, &m)| if m { p } else { 0.0 })
        .collect();
    let mut boxes = Vec::new();
    if decision.label == 1 {
        let mut fired: Vec<(usize, f64)> = patch_scores
            .iter()
            .enumerate()
            .filter(|&(i, &s)| mask[i] && s >= settings.threshold)
            .map(|(i, &s)| (i, s))
            .collect();
        if let Some(i) = decision.selected {
            if !fired.iter().any(|&(j, _)| j == i) {
                fired.push((i, patch_scores[i]));
                fired.sort_by_key(|&(j, _)| j);
            }
        }
        let input = (grid.height(), grid.width());
        if settings.merge {
            for g in merge_adjacent(&fired, grid)? {
                boxes.push(ScoredBox {
                    bbox: map_box(&g.bbox, input, original_size),
                    score: g.score,
                    patches: g.patches,
                });
            }
        } else {
            for (i, s) in fired {
                boxes.push(ScoredBox {
                    bbox: map_box(&grid.patch_box(i)?, input, original_size),
                    score: s,
                    patches: vec![i],
                });
            }
        }
    }
    Ok(DetectionResult {
        bag_label: decision.label,
        bag_score: decision.score,
        boxes,
        patch_scores,
        selected: decision.selected,
        heatmap: None,
    })
}

/// Runs the model on `sample` and attaches the rollout heat map.
pub fn detect(
    model: &Model,
    sample: &ImageSample,
    settings: &InferenceSettings,
    extraction: &ExtractionSettings,
) -> Result<DetectionResult> {
    settings.validate()?;
    let cfg = model.config().encoder;
    let out = model.forward(&sample.pixels)?;
    let edge = settings.edge_mask.then_some(extraction);
    let mask = patch_mask(sample, cfg.patch_size, cfg.num_patches(), edge)?;
    let grid = cfg.grid()?;
    let mut result = detect_from_output(&out, &mask, &grid, sample.original_size, settings)?;
    result.heatmap = Some(attention_rollout(&out.attention)?);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AttentionRecord;
    use crate::mil::InstanceScores;
    use ndarray::Array2;

    fn output(pos: &[f64]) -> ModelOutput {
        // Logit pair (0, ln(p / (1 - p))) gives positive probability p.
        let logits = Array2::from_shape_fn((pos.len(), 2), |(i, c)| {
            if c == 1 {
                (pos[i] / (1.0 - pos[i])).ln()
            } else {
                0.0
            }
        });
        ModelOutput {
            scores: InstanceScores::from_logits(logits).unwrap(),
            cls_probs: [0.5, 0.5],
            attention: AttentionRecord { layers: vec![] },
        }
    }

    fn grid() -> PatchGrid {
        PatchGrid::new(64, 64, 16).unwrap()
    }

    #[test]
    fn one_edge_patch_one_box() {
        let mut p = vec![0.1; 16];
        p[4] = 0.9;
        let r = detect_from_output(
            &output(&p),
            &[true; 16],
            &grid(),
            (64, 64),
            &InferenceSettings::default(),
        )
        .unwrap();
        assert_eq!(r.bag_label, 1);
        assert_eq!(r.boxes.len(), 1);
        assert_eq!(r.boxes[0].bbox, BoundingBox::new(0, 16, 16, 32).unwrap());
    }

    #[test]
    fn off_band_patch_is_suppressed() {
        let mut p = vec![0.1; 16];
        p[5] = 0.95;
        let mut mask = [true; 16];
        mask[5] = false;
        let r = detect_from_output(
            &output(&p),
            &mask,
            &grid(),
            (64, 64),
            &InferenceSettings::default(),
        )
        .unwrap();
        assert_eq!(r.bag_label, 0);
        assert!(r.boxes.is_empty());
        assert_eq!(r.patch_scores[5], 0.0);
    }

    #[test]
    fn negative_bag_has_no_boxes() {
        let p = vec![0.45; 16];
        let s = InferenceSettings {
            threshold: 0.3,
            ..Default::default()
        };
        let r = detect_from_output(&output(&p), &[true; 16], &grid(), (64, 64), &s).unwrap();
        assert_eq!(r.bag_label, 0);
        assert!(r.boxes.is_empty());
    }

    #[test]
    fn selected_patch_always_boxed() {
        let mut p = vec![0.1; 16];
        p[9] = 0.6;
        let s = InferenceSettings {
            threshold: 0.8,
            ..Default::default()
        };
        let r = detect_from_output(&output(&p), &[true; 16], &grid(), (64, 64), &s).unwrap();
        assert_eq!(r.boxes.len(), 1);
        assert_eq!(r.boxes[0].patches, vec![9]);
    }

    #[test]
    fn boxes_map_outward() {
        let b = BoundingBox::new(16, 16, 32, 32).unwrap();
        assert_eq!(
            map_box(&b, (64, 64), (100, 90)),
            BoundingBox::new(22, 25, 45, 50).unwrap()
        );
        let full = BoundingBox::new(0, 0, 64, 64).unwrap();
        assert_eq!(
            map_box(&full, (64, 64), (37, 51)),
            BoundingBox::new(0, 0, 51, 37).unwrap()
        );
    }

    #[test]
    fn merge_flag_joins_neighbours() {
        let mut p = vec![0.1; 16];
        p[1] = 0.8;
        p[2] = 0.9;
        let s = InferenceSettings {
            merge: true,
            ..Default::default()
        };
        let r = detect_from_output(&output(&p), &[true; 16], &grid(), (64, 64), &s).unwrap();
        assert_eq!(r.boxes.len(), 1);
        assert_eq!(r.boxes[0].bbox, BoundingBox::new(16, 0, 48, 16).unwrap());
    }

    #[test]
    fn json_layout() {
        let mut p = vec![0.1; 16];
        p[0] = 0.75;
        let r = detect_from_output(
            &output(&p),
            &[true; 16],
            &grid(),
            (64, 64),
            &InferenceSettings::default(),
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["bag_label"], 1);
        assert_eq!(v["boxes"][0].as_array().unwrap().len(), 5);
        assert_eq!(v["boxes"][0][2], 16.0);
    }
}
