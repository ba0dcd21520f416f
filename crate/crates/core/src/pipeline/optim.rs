//! AdamW and the cosine schedule with warm restarts.

use serde::{Deserialize, Serialize};

use crate::checkpoint::OptimizerState;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled weight decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        AdamW {
            config,
            state: OptimizerState {
                step: 0,
                m: params.zeros_like(),
                v: params.zeros_like(),
            },
        }
    }

    pub fn from_state(config: AdamWConfig, state: OptimizerState) -> Self {
        AdamW { config, state }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.m.len() {
            return Err(Error::Shape(
                "optimizer, parameters and gradients disagree".into(),
            ));
        }
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let moments = self.state.m.iter_mut().zip(self.state.v.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments)
        {
            if p.dim() != g.dim() {
                return Err(Error::Shape("gradient shape".into()));
            }
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(&mut **m)
                .and(&mut **v)
                .for_each(|p, &g, m, v| {
                    *p -= lr * c.weight_decay * *p;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                });
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts, evaluated at a fractional epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmRestarts {
    pub t0: f64,
    pub t_mult: f64,
    pub eta_min: f64,
}

impl Default for WarmRestarts {
    fn default() -> Self {
        WarmRestarts {
            t0: 10.0,
            t_mult: 2.0,
            eta_min: 0.0,
        }
    }
}

impl WarmRestarts {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(Error::invalid("schedule.t0", "must be positive"));
        }
        if !(self.t_mult >= 1.0 && self.t_mult.is_finite()) {
            return Err(Error::invalid("schedule.t_mult", "must be >= 1"));
        }
        if !(self.eta_min >= 0.0) {
            return Err(Error::invalid("schedule.eta_min", "must be >= 0"));
        }
        Ok(())
    }

    /// Position inside the current cycle and the cycle length.
    pub fn cycle(&self, epoch: f64) -> (f64, f64) {
        if self.t_mult == 1.0 {
            return (epoch % self.t0, self.t0);
        }
        let n = ((epoch / self.t0 * (self.t_mult - 1.0) + 1.0).ln() / self.t_mult.ln()).floor();
        let start = self.t0 * (self.t_mult.powf(n) - 1.0) / (self.t_mult - 1.0);
        let len = self.t0 * self.t_mult.powf(n);
        // Guard against rounding just below a restart boundary.
        if epoch - start >= len {
            (epoch - start - len, len * self.t_mult)
        } else {
            ((epoch - start).max(0.0), len)
        }
    }

    pub fn lr(&self, base: f64, epoch: f64) -> f64 {
        let (cur, len) = self.cycle(epoch);
        self.eta_min
            + (base - self.eta_min) * (1.0 + (std::f64::consts::PI * cur / len).cos()) / 2.0
    }
}
