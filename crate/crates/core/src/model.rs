//! Encoder plus the two heads: the instance head over patch tokens and the
//! class head over the class token.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat};
use crate::data::ImageSample;
use crate::encoder::{encoder_graph, patchify, AttentionRecord, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{mil_term_grad, LossBreakdown, LossConfig, LossInput, PROB_EPS};
use crate::mil::{
    bag_probability, bag_probability_grad, Aggregation, InstanceScores, MlpHead, POSITIVE,
};
use crate::params::ParamStore;

pub const INSTANCE_HEAD: &str = "micm";
pub const CLASS_HEAD: &str = "cls_head";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Hidden width of both heads; `None` means `embed_dim / 2`.
    #[serde(default)]
    pub head_hidden: Option<usize>,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            head_hidden: None,
            aggregation: Aggregation::Selected,
        }
    }

    pub fn vit_base() -> Self {
        ModelConfig {
            encoder: EncoderConfig::vit_base(),
            head_hidden: None,
            aggregation: Aggregation::Selected,
        }
    }

    pub fn hidden(&self) -> usize {
        self.head_hidden
            .unwrap_or(self.encoder.embed_dim / 2)
            .max(1)
    }

    pub fn instance_head(&self) -> MlpHead<'static> {
        MlpHead {
            prefix: INSTANCE_HEAD,
            input_dim: self.encoder.embed_dim,
            hidden: self.hidden(),
        }
    }

    pub fn class_head(&self) -> MlpHead<'static> {
        MlpHead {
            prefix: CLASS_HEAD,
            input_dim: self.encoder.embed_dim,
            hidden: self.hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head_hidden == Some(0) {
            return Err(Error::invalid("model.head_hidden", "must be positive"));
        }
        Ok(())
    }

    pub fn parameter_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = self.encoder.parameter_shapes();
        out.extend(self.instance_head().parameter_shapes());
        out.extend(self.class_head().parameter_shapes());
        out
    }
}

/// Everything the model produces for one image.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub scores: InstanceScores,
    pub cls_probs: [f64; 2],
    pub attention: AttentionRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.encoder.init_params(&mut rng, &mut params);
        config.instance_head().init_params(&mut rng, &mut params);
        config.class_head().init_params(&mut rng, &mut params);
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, rows, cols) in config.parameter_shapes() {
            match params.get(&name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(m) if m.dim() != (rows, cols) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected ({rows}, {cols})",
                        m.dim()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_input(&self, pixels: &Array3<f32>) -> Result<()> {
        let cfg = &self.config.encoder;
        let (h, w, c) = pixels.dim();
        if (h, w) != cfg.input_size || c != cfg.channels {
            return Err(Error::Shape(format!(
                "input {h}x{w}x{c} does not match model input {}x{}x{}",
                cfg.input_size.0, cfg.input_size.1, cfg.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, pixels: &Array3<f32>) -> Result<ModelOutput> {
        Ok(self.run(pixels, None)?.0)
    }

    /// Forward pass; with `seed_loss = Some((label, cfg, batch_size))` also
    /// backpropagates this sample's share of the batch loss.
    fn run(
        &self,
        pixels: &Array3<f32>,
        seed_loss: Option<(u8, &LossConfig, usize)>,
    ) -> Result<(ModelOutput, Option<Vec<Mat>>)> {
        self.check_input(pixels)?;
        let cfg = &self.config.encoder;
        let (patches, grid) = patchify(pixels, cfg.patch_size)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.leaf(patches);
        let enc = encoder_graph(&mut g, cfg, &bound, x);
        let patch_tokens = g.slice_rows(enc.tokens, 1, grid.count());
        let cls_token = g.slice_rows(enc.tokens, 0, 1);
        let inst = self
            .config
            .instance_head()
            .graph(&mut g, &bound, patch_tokens);
        let cls = self.config.class_head().graph(&mut g, &bound, cls_token);
        let scores = InstanceScores::from_logits(g.value(inst).clone())?;
        let cls_logits = g.value(cls);
        if cls_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class logits".into()));
        }
        let cls_p = crate::mil::softmax_rows(cls_logits);
        let cls_probs = [cls_p[[0, 0]], cls_p[[0, 1]]];
        let grads = match seed_loss {
            None => None,
            Some((label, loss, m)) => {
                let m = m as f64;
                let y = self.loss_prob(&scores)?;
                let d_prob = mil_term_grad(label, y, loss)? / m;
                let mut d_inst = Mat::zeros(scores.logits.dim());
                let mut seed_row = |i: usize, d: f64| {
                    let p = scores.probs[[i, POSITIVE]];
                    d_inst[[i, POSITIVE]] = d * p * (1.0 - p);
                    d_inst[[i, 1 - POSITIVE]] = -d * p * (1.0 - p);
                };
                match self.config.aggregation {
                    Aggregation::Selected => seed_row(scores.selected_index, d_prob),
                    Aggregation::NoisyOr => {
                        let dp = bag_probability_grad(&scores.positive_probs());
                        for (i, g) in dp.into_iter().enumerate() {
                            seed_row(i, d_prob * g);
                        }
                    }
                }
                let mut d_cls = Mat::zeros((1, 2));
                let py = cls_probs[label as usize];
                if (PROB_EPS..=1.0 - PROB_EPS).contains(&py) {
                    for c in 0..2 {
                        let onehot = if c == label as usize { 1.0 } else { 0.0 };
                        d_cls[[0, c]] = loss.lambda * (cls_probs[c] - onehot) / m;
                    }
                }
                let mut grads = g.backward(&[(inst, d_inst), (cls, d_cls)]);
                Some(
                    bound
                        .iter()
                        .map(|(name, v)| {
                            grads.take(v).unwrap_or_else(|| {
                                Mat::zeros(self.params.get(name).expect("bound").dim())
                            })
                        })
                        .collect(),
                )
            }
        };
        Ok((
            ModelOutput {
                scores,
                cls_probs,
                attention: crate::encoder::AttentionRecord {
                    layers: enc.attention,
                },
            },
            grads,
        ))
    }

    /// Probability fed to the MIL loss under the configured aggregation.
    pub fn loss_prob(&self, scores: &InstanceScores) -> Result<f64> {
        Ok(match self.config.aggregation {
            Aggregation::Selected => scores.selected_prob,
            Aggregation::NoisyOr => bag_probability(&scores.positive_probs())?.value(),
        })
    }

    /// Batch loss and its gradient with respect to every parameter.
    ///
    /// Samples run in parallel; gradients are summed in batch order so the
    /// result does not depend on thread scheduling.
    pub fn loss_and_grad(
        &self,
        batch: &[&ImageSample],
        loss: &LossConfig,
    ) -> Result<(LossBreakdown, ParamStore)> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let m = batch.len();
        let mut inputs = Vec::with_capacity(m);
        let mut total = self.params.zeros_like();
        let chunk = rayon::current_num_threads().max(1);
        for group in batch.chunks(chunk) {
            let results: Vec<Result<(ModelOutput, Option<Vec<Mat>>)>> = group
                .par_iter()
                .map(|s| self.run(&s.pixels, Some((s.label, loss, m))))
                .collect();
            for (s, r) in group.iter().zip(results) {
                let (out, grads) = r?;
                inputs.push(LossInput {
                    label: s.label,
                    selected_prob: self.loss_prob(&out.scores)?,
                    cls_probs: out.cls_probs,
                });
                for ((_, acc), g) in total.iter_mut().zip(grads.expect("requested")) {
                    *acc += &g;
                }
            }
        }
        Ok((LossBreakdown::compute(&inputs, loss)?, total))
    }

    /// Batch loss only. With `tie_tolerance`, fails with [`Error::ArgmaxTie`]
    /// when the two most positive instances of any sample are closer than that.
    pub fn batch_loss(
        &self,
        batch: &[&ImageSample],
        loss: &LossConfig,
        tie_tolerance: Option<f64>,
    ) -> Result<LossBreakdown> {
        let mut inputs = Vec::with_capacity(batch.len());
        for s in batch {
            let out = self.forward(&s.pixels)?;
            if let Some(tol) = tie_tolerance {
                if let Some((a, b)) = near_tie(&out.scores.probs, tol) {
                    return Err(Error::ArgmaxTie(a, b));
                }
            }
            inputs.push(LossInput {
                label: s.label,
                selected_prob: self.loss_prob(&out.scores)?,
                cls_probs: out.cls_probs,
            });
        }
        LossBreakdown::compute(&inputs, loss)
    }
}

/// The two most positive instances when their probabilities differ by less than `tol`.
pub fn near_tie(probs: &Array2<f64>, tol: f64) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..probs.nrows()).collect();
    order.sort_by(|&a, &b| probs[[b, POSITIVE]].total_cmp(&probs[[a, POSITIVE]]));
    match order.as_slice() {
        [a, b, ..] if (probs[[*a, POSITIVE]] - probs[[*b, POSITIVE]]).abs() < tol => Some((*a, *b)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gradient_check;
    use rand::Rng;

    fn fixture(seed: u64, n: usize) -> Vec<ImageSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let px = Array3::from_shape_fn((64, 64, 3), |_| rng.random_range(-1.5f32..1.5));
                ImageSample::new(format!("s{i}"), px, (i % 2) as u8, None).unwrap()
            })
            .collect()
    }

    #[test]
    fn forward_shapes() {
        let model = Model::random(ModelConfig::toy(), 1).unwrap();
        let s = &fixture(2, 1)[0];
        let out = model.forward(&s.pixels).unwrap();
        assert_eq!(out.scores.probs.dim(), (16, 2));
        assert!((out.cls_probs[0] + out.cls_probs[1] - 1.0).abs() < 1e-12);
        assert_eq!(out.attention.layers.len(), 2);
        assert_eq!(out.attention.layers[0].dim(), (17, 17));
    }

    #[test]
    fn head_gradients_match_differences() {
        let model = Model::random(ModelConfig::toy(), 5).unwrap();
        let samples = fixture(6, 3);
        let batch: Vec<&ImageSample> = samples.iter().collect();
        let loss = LossConfig::default();
        let (b, grads) = model.loss_and_grad(&batch, &loss).unwrap();
        assert_eq!(b.l_all, b.l_mil + loss.lambda * b.l_cls);
        let theta = model.params().flatten();
        let analytic = grads.flatten();
        let names: Vec<(String, usize)> = model
            .params()
            .iter()
            .map(|(n, m)| (n.to_string(), m.len()))
            .collect();
        let mut coords = Vec::new();
        let mut offset = 0;
        for (name, len) in &names {
            if name.starts_with("micm") || name.starts_with("cls_head") {
                coords.extend((offset..offset + len).step_by(7));
            }
            offset += len;
        }
        let f = |t: &[f64]| {
            let mut m = model.clone();
            m.params_mut().unflatten(t);
            Ok(m.batch_loss(&batch, &loss, Some(1e-6))?.l_all)
        };
        let r = gradient_check(f, &theta, &analytic, &coords, 1e-5).unwrap();
        assert!(
            r.max_relative_error < 1e-4,
            "{:?}",
            r.samples.iter().max_by(|a, b| a.3.total_cmp(&b.3))
        );
    }

    #[test]
    fn noisy_or_gradients_match_differences() {
        let mut cfg = ModelConfig::toy();
        cfg.aggregation = Aggregation::NoisyOr;
        let model = Model::random(cfg, 8).unwrap();
        let samples = fixture(9, 2);
        let batch: Vec<&ImageSample> = samples.iter().collect();
        let loss = LossConfig::default();
        let (_, grads) = model.loss_and_grad(&batch, &loss).unwrap();
        let theta = model.params().flatten();
        let n = theta.len();
        let coords: Vec<usize> = (0..16).map(|i| (i * 7919) % n).chain(n - 40..n).collect();
        let f = |t: &[f64]| {
            let mut m = model.clone();
            m.params_mut().unflatten(t);
            Ok(m.batch_loss(&batch, &loss, None)?.l_all)
        };
        let r = gradient_check(f, &theta, &grads.flatten(), &coords, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn near_tie_detection() {
        let p = Array2::from_shape_vec((3, 2), vec![0.5, 0.5, 0.4, 0.6, 0.4 + 1e-9, 0.6 - 1e-9])
            .unwrap();
        assert_eq!(near_tie(&p, 1e-6), Some((1, 2)));
        assert_eq!(near_tie(&p, 1e-12), None);
    }

    #[test]
    fn rejects_wrong_input_size() {
        let model = Model::random(ModelConfig::toy(), 1).unwrap();
        assert!(model.forward(&Array3::zeros((32, 32, 3))).is_err());
    }
}
