//! Bag decisions and held-out evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::extraction::{sample_edge_mask, ExtractionSettings};
use crate::model::{Model, ModelOutput};
use crate::pipeline::metrics::{Confusion, Metrics};

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// Selected instance restricted to the rim band, positive iff its probability ≥ 0.5.
    #[default]
    MicmMasked,
    /// Class-token head, positive iff its positive probability ≥ 0.5.
    ClsHead,
    /// Positive if either of the above is.
    EitherPositive,
}

impl DecisionRule {
    pub const ALL: [DecisionRule; 3] = [
        DecisionRule::MicmMasked,
        DecisionRule::ClsHead,
        DecisionRule::EitherPositive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecisionRule::MicmMasked => "micm_masked",
            DecisionRule::ClsHead => "cls_head",
            DecisionRule::EitherPositive => "either_positive",
        }
    }
}

impl std::str::FromStr for DecisionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecisionRule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid("inference.decision_rule", format!("unknown rule {s}")))
    }
}

/// Bag-level decision for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BagDecision {
    pub label: u8,
    pub score: f64,
    /// Selected instance after masking, if any patch survived the mask.
    pub selected: Option<usize>,
}

/// Patch mask for `sample`: the rim band when `edge` is set, otherwise every patch.
pub fn patch_mask(
    sample: &ImageSample,
    patch_size: usize,
    count: usize,
    edge: Option<&ExtractionSettings>,
) -> Result<Vec<bool>> {
    match edge {
        Some(settings) => sample_edge_mask(sample, patch_size, settings),
        None => Ok(vec![true; count]),
    }
}

/// Applies `rule` to a forward pass. A mask that keeps no patch gives a
/// masked score of 0.
pub fn decide(out: &ModelOutput, mask: &[bool], rule: DecisionRule) -> Result<BagDecision> {
    let (selected, micm_score) = match out.scores.masked(mask) {
        Ok((i, p)) => (Some(i), p),
        Err(Error::EmptySelection) => (None, 0.0),
        Err(e) => return Err(e),
    };
    let cls_score = out.cls_probs[1];
    let score = match rule {
        DecisionRule::MicmMasked => micm_score,
        DecisionRule::ClsHead => cls_score,
        DecisionRule::EitherPositive => micm_score.max(cls_score),
    };
    Ok(BagDecision {
        label: u8::from(score >= DECISION_THRESHOLD),
        score,
        selected,
    })
}

/// Per-sample decisions under each of `rules`, in sample order.
pub fn predict_all(
    model: &Model,
    samples: &[&ImageSample],
    rules: &[DecisionRule],
    edge: Option<&ExtractionSettings>,
) -> Result<Vec<Vec<BagDecision>>> {
    let cfg = model.config().encoder;
    samples
        .par_iter()
        .map(|s| {
            let out = model.forward(&s.pixels)?;
            let mask = patch_mask(s, cfg.patch_size, cfg.num_patches(), edge)?;
            rules.iter().map(|&r| decide(&out, &mask, r)).collect()
        })
        .collect()
}

/// Metrics under each rule, in the order given.
pub fn evaluate(
    model: &Model,
    samples: &[&ImageSample],
    rules: &[DecisionRule],
    edge: Option<&ExtractionSettings>,
) -> Result<Vec<Metrics>> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation fold".into()));
    }
    let decisions = predict_all(model, samples, rules, edge)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    (0..rules.len())
        .map(|r| {
            let preds: Vec<u8> = decisions.iter().map(|d| d[r].label).collect();
            Metrics::from_confusion(Confusion::from_predictions(&labels, &preds)?)
        })
        .collect()
}
