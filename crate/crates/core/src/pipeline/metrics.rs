//! Confusion counts, classification metrics and the fold report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "fold,accuracy,precision,recall,f1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(labels: &[u8], predictions: &[u8]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut c = Confusion::default();
        for (&y, &p) in labels.iter().zip(predictions) {
            match (y, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                (y, p) => return Err(Error::InvalidLabel(y.max(p))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1. A zero denominator gives 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        if c.total() == 0 {
            return Err(Error::Empty("evaluation fold".into()));
        }
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        Ok(Metrics {
            confusion: c,
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        })
    }

    pub fn row(&self) -> MetricRow {
        MetricRow {
            accuracy: self.accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }
}

/// One report row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricRow {
    fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

/// Column-wise arithmetic mean.
pub fn average_rows(rows: &[MetricRow]) -> Result<MetricRow> {
    if rows.is_empty() {
        return Err(Error::Empty("fold report".into()));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(MetricRow {
        accuracy: mean(|r| r.accuracy),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
    })
}

/// Per-fold rows plus their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub folds: Vec<MetricRow>,
    pub average: MetricRow,
}

impl FoldReport {
    pub fn new(folds: Vec<MetricRow>) -> Result<Self> {
        let average = average_rows(&folds)?;
        Ok(FoldReport { folds, average })
    }

    /// `k` numbered rows and an `average` row, six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        let rows = self
            .folds
            .iter()
            .enumerate()
            .map(|(i, r)| ((i + 1).to_string(), r))
            .chain(std::iter::once(("average".to_string(), &self.average)));
        for (name, r) in rows {
            out.push_str(&name);
            for v in r.values() {
                write!(out, ",{v:.6}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let bad = |reason: String| Error::invalid("metrics csv", reason);
        let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
            return Err(bad("unexpected header".into()));
        }
        let mut folds = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            if &record[0] == "average" {
                continue;
            }
            let v: Vec<f64> = (1..5)
                .map(|i| record[i].parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect::<Result<_>>()?;
            folds.push(MetricRow {
                accuracy: v[0],
                precision: v[1],
                recall: v[2],
                f1: v[3],
            });
        }
        FoldReport::new(folds)
    }

    /// Aligned table in percent with one decimal.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<8} {:>9} {:>9} {:>9} {:>9}\n",
            "fold", "accuracy", "precision", "recall", "f1"
        );
        let rows = self
            .folds
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("{}", i + 1), r))
            .chain(std::iter::once(("average".to_string(), &self.average)));
        for (name, r) in rows {
            let [a, p, rc, f] = r.values().map(|v| v * 100.0);
            writeln!(out, "{name:<8} {a:>9.1} {p:>9.1} {rc:>9.1} {f:>9.1}").expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn arithmetic_example() {
        let m = Metrics::from_confusion(Confusion {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 5,
        })
        .unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (0.8, 0.75, 0.75, 0.75)
        );
    }

    #[test]
    fn perfect_and_degenerate() {
        let labels = [1, 0, 1, 0];
        let perfect =
            Metrics::from_confusion(Confusion::from_predictions(&labels, &labels).unwrap())
                .unwrap();
        assert_eq!(perfect.row().values(), [1.0; 4]);
        let none = Metrics::from_confusion(Confusion::from_predictions(&labels, &[0; 4]).unwrap())
            .unwrap();
        assert_eq!(
            (none.accuracy, none.precision, none.recall, none.f1),
            (0.5, 0.0, 0.0, 0.0)
        );
        assert!(Metrics::from_confusion(Confusion::default()).is_err());
    }

    #[test]
    fn report_shape_and_round_trip() {
        let row = MetricRow {
            accuracy: 0.9,
            precision: 0.8,
            recall: 0.7,
            f1: 0.75,
        };
        let r = FoldReport::new(vec![row; 5]).unwrap();
        assert_eq!(r.average, row);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("fold,accuracy,precision,recall,f1\n1,0.900000,"));
        assert!(csv.lines().last().unwrap().starts_with("average,"));
        assert_eq!(FoldReport::from_csv(&csv).unwrap(), r);
        assert_eq!(r.to_text().lines().count(), 7);
    }

    proptest! {
        #[test]
        fn identities(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50) {
            let c = Confusion { tp, fp, fn_, tn };
            prop_assume!(c.total() > 0);
            let m = Metrics::from_confusion(c).unwrap();
            prop_assert_eq!(m.accuracy, (tp + tn) as f64 / c.total() as f64);
            if m.precision + m.recall > 0.0 {
                let harmonic = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - harmonic).abs() < 1e-12);
            } else {
                prop_assert_eq!(m.f1, 0.0);
            }
            for v in m.row().values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
