//! Weakly supervised loss: α-balanced focal loss plus β-weighted cross-entropy
//! on the selected instance, and cross-entropy on the class-token head.
//!
//! ```text
//! L_all = L_mil + λ · L_cls
//! L_mil = mean_k [ focal(y_k, ŷ_k) + β · CE(y_k, ŷ_k) ]
//! L_cls = mean_k CE(y_k, p_cls,k)
//! ```
//!
//! Every probability is clamped to `[ε, 1 − ε]` before a logarithm, and the
//! derivative helpers treat the clamp as flat.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            beta: 0.5,
            lambda: 0.5,
        }
    }
}

impl LossConfig {
    /// Cross-entropy on the selected instance only, scaled by one half.
    pub fn selected_instance_ce() -> Self {
        LossConfig {
            alpha: 0.5,
            gamma: 0.0,
            beta: 0.0,
            lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("loss.alpha", "must lie in (0, 1]"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("loss.gamma", "must be >= 0"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("loss.beta", "must be >= 0"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("loss.lambda", "must be >= 0"));
        }
        Ok(())
    }
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::InvalidLabel(y));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-log p[y]` for a two-class probability pair.
pub fn cross_entropy(y: u8, p: [f64; 2]) -> Result<f64> {
    check_label(y)?;
    Ok(-clamp_prob(p[y as usize]).ln())
}

/// Binary cross-entropy on the positive-class probability.
pub fn binary_cross_entropy(y: u8, y_hat: f64) -> Result<f64> {
    cross_entropy(y, [1.0 - y_hat, y_hat])
}

/// α-balanced focal term on the positive-class probability `y_hat`.
pub fn focal_term(y: u8, y_hat: f64, alpha: f64, gamma: f64) -> Result<f64> {
    check_label(y)?;
    let q = clamp_prob(y_hat);
    Ok(if y == 1 {
        -alpha * (1.0 - q).powf(gamma) * q.ln()
    } else {
        -(1.0 - alpha) * q.powf(gamma) * (1.0 - q).ln()
    })
}

/// `x^e` with `0^0 = 1` and a zero result whenever the coefficient multiplying it vanishes.
fn pow_or_zero(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

/// `d focal_term / d y_hat`.
pub fn focal_term_grad(y: u8, y_hat: f64, alpha: f64, gamma: f64) -> Result<f64> {
    check_label(y)?;
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&y_hat) {
        return Ok(0.0);
    }
    let q = y_hat;
    Ok(if y == 1 {
        let gamma_part = if gamma == 0.0 {
            0.0
        } else {
            gamma * pow_or_zero(1.0 - q, gamma - 1.0) * q.ln()
        };
        alpha * (gamma_part - pow_or_zero(1.0 - q, gamma) / q)
    } else {
        let gamma_part = if gamma == 0.0 {
            0.0
        } else {
            gamma * pow_or_zero(q, gamma - 1.0) * (1.0 - q).ln()
        };
        -(1.0 - alpha) * (gamma_part - pow_or_zero(q, gamma) / (1.0 - q))
    })
}

/// `d binary_cross_entropy / d y_hat`.
pub fn binary_cross_entropy_grad(y: u8, y_hat: f64) -> Result<f64> {
    check_label(y)?;
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&y_hat) {
        return Ok(0.0);
    }
    Ok(if y == 1 {
        -1.0 / y_hat
    } else {
        1.0 / (1.0 - y_hat)
    })
}

/// Per-sample MIL term: `focal(y, ŷ) + β · CE(y, ŷ)`.
pub fn mil_term(y: u8, y_hat: f64, cfg: &LossConfig) -> Result<f64> {
    Ok(focal_term(y, y_hat, cfg.alpha, cfg.gamma)? + cfg.beta * binary_cross_entropy(y, y_hat)?)
}

pub fn mil_term_grad(y: u8, y_hat: f64, cfg: &LossConfig) -> Result<f64> {
    Ok(focal_term_grad(y, y_hat, cfg.alpha, cfg.gamma)?
        + cfg.beta * binary_cross_entropy_grad(y, y_hat)?)
}

/// Mean MIL term over `(label, selected positive probability)` pairs.
pub fn mil_loss(batch: &[(u8, f64)], cfg: &LossConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let mut sum = 0.0;
    for &(y, y_hat) in batch {
        sum += mil_term(y, y_hat, cfg)?;
    }
    Ok(sum / batch.len() as f64)
}

/// Mean cross-entropy of the class-token head.
pub fn cls_loss(batch: &[(u8, [f64; 2])]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let mut sum = 0.0;
    for &(y, p) in batch {
        sum += cross_entropy(y, p)?;
    }
    Ok(sum / batch.len() as f64)
}

pub fn total_loss(l_mil: f64, l_cls: f64, lambda: f64) -> f64 {
    l_mil + lambda * l_cls
}

/// Loss components for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_mil: f64,
    pub l_all: f64,
    pub mil_terms: Vec<f64>,
    pub cls_terms: Vec<f64>,
}

/// One sample's inputs to the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossInput {
    pub label: u8,
    /// Positive probability of the selected instance.
    pub selected_prob: f64,
    /// Class-token head probabilities.
    pub cls_probs: [f64; 2],
}

impl LossBreakdown {
    pub fn compute(batch: &[LossInput], cfg: &LossConfig) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty("loss batch".into()));
        }
        let mil_terms = batch
            .iter()
            .map(|s| mil_term(s.label, s.selected_prob, cfg))
            .collect::<Result<Vec<_>>>()?;
        let cls_terms = batch
            .iter()
            .map(|s| cross_entropy(s.label, s.cls_probs))
            .collect::<Result<Vec<_>>>()?;
        let m = batch.len() as f64;
        let l_mil = mil_terms.iter().sum::<f64>() / m;
        let l_cls = cls_terms.iter().sum::<f64>() / m;
        Ok(LossBreakdown {
            l_cls,
            l_mil,
            l_all: total_loss(l_mil, l_cls, cfg.lambda),
            mil_terms,
            cls_terms,
        })
    }
}

/// Result of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(coordinate, analytic, numeric, relative error)`
    pub samples: Vec<(usize, f64, f64, f64)>,
}

/// Relative error with a floor on the denominator so vanishing gradients do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic[i]` with the central difference of `loss` at each coordinate.
///
/// `loss` may fail with [`Error::ArgmaxTie`] when a perturbation crosses a
/// selection boundary; the error propagates so the caller can resample.
pub fn gradient_check<F>(
    loss: F,
    theta: &[f64],
    analytic: &[f64],
    coordinates: &[usize],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradient entries",
            theta.len(),
            analytic.len()
        )));
    }
    let mut point = theta.to_vec();
    let mut samples = Vec::with_capacity(coordinates.len());
    let mut worst = 0.0f64;
    for &i in coordinates {
        if i >= theta.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: theta.len(),
            });
        }
        point[i] = theta[i] + step;
        let plus = loss(&point)?;
        point[i] = theta[i] - step;
        let minus = loss(&point)?;
        point[i] = theta[i];
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        worst = worst.max(err);
        samples.push((i, analytic[i], numeric, err));
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        samples,
    })
}
