//! k-fold cross-validation with per-rule reports.

use std::path::PathBuf;

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::extraction::ExtractionSettings;
use crate::losses::LossConfig;
use crate::model::Model;
use crate::pipeline::evaluate::{evaluate, DecisionRule};
use crate::pipeline::kfold::{stratified_holdout, stratified_kfold, FoldSplit};
use crate::pipeline::metrics::{FoldReport, Metrics};
use crate::pipeline::train::{train, LossCurve, TrainConfig, TrainOptions};

pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Clone)]
pub struct CrossValOptions {
    pub k: usize,
    /// Rule behind `metrics.csv`; every rule is still reported.
    pub rule: DecisionRule,
    pub edge: Option<ExtractionSettings>,
    pub out_dir: Option<PathBuf>,
}

impl Default for CrossValOptions {
    fn default() -> Self {
        CrossValOptions {
            k: 5,
            rule: DecisionRule::default(),
            edge: Some(ExtractionSettings::default()),
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    /// Metrics per rule, in [`DecisionRule::ALL`] order.
    pub metrics: Vec<Metrics>,
    pub curve: LossCurve,
}

#[derive(Debug, Clone)]
pub struct CrossValResult {
    pub split: FoldSplit,
    pub folds: Vec<FoldResult>,
    pub rule: DecisionRule,
}

impl CrossValResult {
    pub fn report(&self, rule: DecisionRule) -> Result<FoldReport> {
        let r = DecisionRule::ALL
            .iter()
            .position(|&x| x == rule)
            .expect("rule listed");
        FoldReport::new(self.folds.iter().map(|f| f.metrics[r].row()).collect())
    }

    /// Report for the primary rule.
    pub fn primary(&self) -> Result<FoldReport> {
        self.report(self.rule)
    }

    /// All rules side by side, primary first.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let mut rules = vec![self.rule];
        rules.extend(DecisionRule::ALL.into_iter().filter(|&r| r != self.rule));
        for (i, rule) in rules.into_iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("decision rule: {}\n", rule.name()));
            out.push_str(&self.report(rule)?.to_text());
        }
        Ok(out)
    }
}

/// Trains and evaluates one model per fold. `init(fold)` supplies the starting model.
pub fn crossvalidate<F>(
    samples: &[ImageSample],
    init: F,
    train_cfg: &TrainConfig,
    loss: &LossConfig,
    opts: &CrossValOptions,
) -> Result<CrossValResult>
where
    F: Fn(usize) -> Result<Model>,
{
    if samples.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let split = stratified_kfold(&labels, opts.k, train_cfg.seed)?;
    let mut folds = Vec::with_capacity(opts.k);
    for fold in 0..opts.k {
        let (train_idx, held) = split.split(fold)?;
        let (fit_idx, val_idx) = stratified_holdout(
            &train_idx,
            &labels,
            train_cfg.validation_fraction,
            train_cfg.seed.wrapping_add(fold as u64),
        );
        let pick = |idx: &[usize]| idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>();
        let fold_dir = opts
            .out_dir
            .as_ref()
            .map(|d| d.join(format!("fold{}", fold + 1)));
        let topts = TrainOptions {
            out_dir: fold_dir,
            edge: opts.edge,
            selection_rule: opts.rule,
            ..Default::default()
        };
        log::info!(
            "fold {}/{}: {} train, {} val, {} test",
            fold + 1,
            opts.k,
            fit_idx.len(),
            val_idx.len(),
            held.len()
        );
        let outcome = train(
            init(fold)?,
            &pick(&fit_idx),
            &pick(&val_idx),
            train_cfg,
            loss,
            &topts,
        )?;
        let metrics = evaluate(
            &outcome.best,
            &pick(&held),
            &DecisionRule::ALL,
            opts.edge.as_ref(),
        )?;
        folds.push(FoldResult {
            fold,
            best_epoch: outcome.best_epoch,
            metrics,
            curve: outcome.curve,
        });
    }
    let result = CrossValResult {
        split,
        folds,
        rule: opts.rule,
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(METRICS_CSV.into(), result.primary()?.to_csv())?;
        for rule in DecisionRule::ALL {
            write(
                format!("metrics_{}.csv", rule.name()),
                result.report(rule)?.to_csv(),
            )?;
        }
        write(REPORT_TXT.into(), result.to_text()?)?;
    }
    Ok(result)
}
