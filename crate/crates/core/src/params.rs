//! Named parameter storage shared by the encoder, the heads and the optimizer.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Mat, Var};

/// Ordered map from parameter name to a 2-D matrix.
///
/// Vectors (biases, norm scales) are stored as `1 x n` rows. Iteration order
/// is insertion order, so anything derived from it is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.dim())))
                .collect(),
        }
    }

    /// Flattened view in iteration order, handy for finite-difference checks.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .values()
            .flat_map(|m| m.iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, values: &[f64]) {
        let mut offset = 0;
        for m in self.tensors.values_mut() {
            for (dst, src) in m.iter_mut().zip(&values[offset..]) {
                *dst = *src;
            }
            offset += m.len();
        }
        assert_eq!(offset, values.len(), "flat parameter length");
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a [`ParamStore`], keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Glorot-uniform weight of shape `(out, in)`.
pub fn xavier_uniform(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Mat {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Mat::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound))
}

/// Normal draws clipped at two standard deviations.
pub fn truncated_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let normal = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn((rows, cols), |_| {
        normal.sample(rng).clamp(-2.0 * std, 2.0 * std)
    })
}

pub fn zeros_row(n: usize) -> Mat {
    Mat::zeros((1, n))
}

pub fn ones_row(n: usize) -> Mat {
    Mat::from_elem((1, n), 1.0)
}
