//! Attention rollout.

use ndarray::Array2;

use crate::data::PatchGrid;
use crate::encoder::AttentionRecord;
use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-6;

/// Class-token relevance of each patch, max-normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutMap {
    pub values: Vec<f64>,
}

impl RolloutMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values laid out on the patch grid.
    pub fn to_grid(&self, grid: &PatchGrid) -> Result<Array2<f64>> {
        Array2::from_shape_vec((grid.rows, grid.cols), self.values.clone()).map_err(|_| {
            Error::Shape(format!(
                "{} values for a {}x{} grid",
                self.len(),
                grid.rows,
                grid.cols
            ))
        })
    }
}

fn check_stochastic(a: &Array2<f64>, layer: usize) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape(format!(
            "attention layer {layer} is {:?}",
            a.dim()
        )));
    }
    for (r, row) in a.rows().into_iter().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0)) || (row.sum() - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::invalid(
                "attention",
                format!("layer {layer} row {r} is not a probability distribution"),
            ));
        }
    }
    Ok(())
}

/// `A'_L ... A'_1` with `A' = rownorm(0.5 A + 0.5 I)`.
pub fn joint_attention(record: &AttentionRecord) -> Result<Array2<f64>> {
    let first = record
        .layers
        .first()
        .ok_or_else(|| Error::Empty("attention record".into()))?;
    let n = first.nrows();
    let mut joint = Array2::<f64>::eye(n);
    for (l, a) in record.layers.iter().enumerate() {
        check_stochastic(a, l)?;
        if a.nrows() != n {
            return Err(Error::Shape(format!(
                "attention layer {l} is {:?}, expected {n}x{n}",
                a.dim()
            )));
        }
        let mut mixed = a * 0.5 + Array2::<f64>::eye(n) * 0.5;
        for mut row in mixed.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        joint = mixed.dot(&joint);
    }
    Ok(joint)
}

/// Class-token row of the joint attention over patch tokens. A map with no
/// mass anywhere becomes all ones.
pub fn attention_rollout(record: &AttentionRecord) -> Result<RolloutMap> {
    let joint = joint_attention(record)?;
    let mut values: Vec<f64> = joint.row(0).iter().skip(1).copied().collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    } else {
        values.iter_mut().for_each(|v| *v = 1.0);
    }
    Ok(RolloutMap { values })
}
