//! Detections, attention rollout and overlays.

pub mod detect;
pub mod merge;
pub mod render;
pub mod rollout;

pub use detect::{
    detect, detect_from_output, map_box, DetectionResult, InferenceSettings, ScoredBox,
};
pub use merge::{merge_adjacent, PatchGroup};
pub use render::{draw_boxes, heatmap_overlay, BoxStyle};
pub use rollout::{attention_rollout, joint_attention, RolloutMap};
