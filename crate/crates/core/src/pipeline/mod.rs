//! Training, evaluation and cross-validation.

pub mod crossval;
pub mod evaluate;
pub mod kfold;
pub mod metrics;
pub mod optim;
pub mod train;

pub use crossval::{crossvalidate, CrossValOptions, CrossValResult};
pub use evaluate::{decide, evaluate, BagDecision, DecisionRule};
pub use kfold::{stratified_holdout, stratified_kfold, FoldSplit};
pub use metrics::{average_rows, Confusion, FoldReport, MetricRow, Metrics};
pub use optim::{AdamW, AdamWConfig, WarmRestarts};
pub use train::{train, LossCurve, Resume, TrainConfig, TrainOptions, TrainOutcome};
