//! Mini-batch training with best-validation checkpointing.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::extraction::ExtractionSettings;
use crate::losses::LossConfig;
use crate::model::Model;
use crate::pipeline::evaluate::{evaluate, DecisionRule};
use crate::pipeline::optim::{AdamW, AdamWConfig, WarmRestarts};

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LOSS_CURVE: &str = "loss_curve.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    /// Everything in `f64`; the only mode, and the one the determinism contract covers.
    #[default]
    #[serde(rename = "f64")]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub schedule: WarmRestarts,
    /// Filled from the run-level seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub precision: Precision,
    /// Share of each training portion held out for checkpoint selection.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-5,
            epochs: 30,
            optimizer: AdamWConfig::default(),
            schedule: WarmRestarts::default(),
            seed: 0,
            precision: Precision::F64,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("train.epochs", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "train.learning_rate",
                "must be a finite value >= 0",
            ));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::invalid(
                "train.validation_fraction",
                "must lie in [0, 0.5)",
            ));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::invalid(
                "train.optimizer",
                "betas must lie in [0, 1)",
            ));
        }
        if !(o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "train.optimizer",
                "eps must be positive and weight_decay >= 0",
            ));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l_all: f64,
    pub l_mil: f64,
    pub l_cls: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr,l_all,l_mil,l_cls\n");
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{:e},{:.12},{:.12},{:.12}",
                s.epoch, s.step, s.lr, s.l_all, s.l_mil, s.l_cls
            )
            .expect("string write");
        }
        out
    }

    pub fn first_epoch_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn last_epoch_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Checkpoint selection key: higher validation accuracy, then lower loss.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Selection {
    accuracy: f64,
    loss: f64,
}

impl Selection {
    fn better_than(&self, other: &Selection) -> bool {
        match self.accuracy.total_cmp(&other.accuracy) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.loss < other.loss,
        }
    }
}

/// Where to pick up an interrupted run.
#[derive(Debug, Clone)]
pub struct Resume {
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
}

impl Resume {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let last = Checkpoint::load(dir.join(LAST_CHECKPOINT))?;
        let best_path = dir.join(BEST_CHECKPOINT);
        let best = if best_path.exists() {
            Some(Checkpoint::load(best_path)?)
        } else {
            None
        };
        Ok(Resume { last, best })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints and the loss curve go here when set.
    pub out_dir: Option<PathBuf>,
    /// Rim settings for validation decisions; `None` scores every patch.
    pub edge: Option<ExtractionSettings>,
    pub selection_rule: DecisionRule,
    pub resume: Option<Resume>,
    /// Stop after this many epochs in total, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub last: Checkpoint,
    pub curve: LossCurve,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn meta_f64(ck: &Checkpoint, key: &str) -> Result<f64> {
    ck.extra
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("missing or bad metadata {key}")))
}

/// Trains `model` on `train_set`, keeping the epoch with the best validation score.
pub fn train(
    mut model: Model,
    train_set: &[&ImageSample],
    val_set: &[&ImageSample],
    cfg: &TrainConfig,
    loss: &LossConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training fold".into()));
    }
    let mut optimizer = AdamW::new(cfg.optimizer, model.params());
    let mut curve = LossCurve::default();
    let mut start_epoch = 0;
    let mut best: Option<(Model, usize, Selection)> = None;
    if let Some(resume) = &opts.resume {
        let last = &resume.last;
        if last.model.config() != model.config() {
            return Err(Error::Checkpoint(
                "resume checkpoint has a different model config".into(),
            ));
        }
        model = last.model.clone();
        let state = last
            .optimizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("resume checkpoint has no optimizer state".into()))?;
        optimizer = AdamW::from_state(cfg.optimizer, state);
        start_epoch = last.epoch;
        if let Some(text) = last.extra.get("loss_curve") {
            curve = serde_json::from_str(text)
                .map_err(|e| Error::Checkpoint(format!("loss_curve: {e}")))?;
        }
        if let Some(b) = &resume.best {
            let sel = Selection {
                accuracy: meta_f64(last, "best_accuracy")?,
                loss: meta_f64(last, "best_loss")?,
            };
            best = Some((b.model.clone(), b.epoch, sel));
        }
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let n = train_set.len();
    let batches = n.div_ceil(cfg.batch_size);
    let end_epoch = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut step = optimizer.state.step as usize;
    let mut last = Checkpoint::new(model.clone());
    for epoch in start_epoch..end_epoch {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let lr = cfg
                .schedule
                .lr(cfg.learning_rate, epoch as f64 + b as f64 / batches as f64);
            let (l, grads) = model.loss_and_grad(&batch, loss)?;
            if !l.l_all.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            optimizer.step(model.params_mut(), &grads, lr)?;
            epoch_loss += l.l_all * batch.len() as f64;
            curve.steps.push(StepRecord {
                epoch,
                step,
                lr,
                l_all: l.l_all,
                l_mil: l.l_mil,
                l_cls: l.l_cls,
            });
        }
        let train_loss = epoch_loss / n as f64;
        let (sel, record) = if val_set.is_empty() {
            (
                Selection {
                    accuracy: 0.0,
                    loss: train_loss,
                },
                EpochRecord {
                    epoch,
                    train_loss,
                    val_loss: None,
                    val_accuracy: None,
                },
            )
        } else {
            let val_loss = model.batch_loss(val_set, loss, None)?.l_all;
            let acc =
                evaluate(&model, val_set, &[opts.selection_rule], opts.edge.as_ref())?[0].accuracy;
            (
                Selection {
                    accuracy: acc,
                    loss: val_loss,
                },
                EpochRecord {
                    epoch,
                    train_loss,
                    val_loss: Some(val_loss),
                    val_accuracy: Some(acc),
                },
            )
        };
        curve.epochs.push(record);
        match (record.val_loss, record.val_accuracy) {
            (Some(vl), Some(va)) => log::info!(
                "epoch {} train {train_loss:.5} val {vl:.5} acc {va:.3}",
                epoch + 1
            ),
            _ => log::info!("epoch {} train {train_loss:.5}", epoch + 1),
        }
        let improved = best.as_ref().is_none_or(|(_, _, s)| sel.better_than(s));
        if improved {
            best = Some((model.clone(), epoch + 1, sel));
        }
        let (_, best_epoch, best_sel) = best.as_ref().expect("set above");
        last = Checkpoint {
            model: model.clone(),
            optimizer: Some(optimizer.state.clone()),
            epoch: epoch + 1,
            extra: [
                ("seed".to_string(), cfg.seed.to_string()),
                ("best_epoch".to_string(), best_epoch.to_string()),
                ("best_accuracy".to_string(), best_sel.accuracy.to_string()),
                ("best_loss".to_string(), best_sel.loss.to_string()),
                (
                    "loss_curve".to_string(),
                    serde_json::to_string(&curve).expect("curve serializes"),
                ),
            ]
            .into_iter()
            .collect(),
        };
        if let Some(dir) = &opts.out_dir {
            last.save(dir.join(LAST_CHECKPOINT))?;
            if improved {
                let mut b = Checkpoint::new(model.clone());
                b.epoch = epoch + 1;
                b.save(dir.join(BEST_CHECKPOINT))?;
            }
            let path = dir.join(LOSS_CURVE);
            std::fs::write(&path, curve.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
    }
    let (best, best_epoch, _) = best.ok_or_else(|| Error::Empty("no epochs to run".into()))?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        last,
        curve,
    })
}
