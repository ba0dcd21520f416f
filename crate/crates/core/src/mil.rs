//! Multiple-instance calculation: a shared per-instance MLP, softmax over the
//! two classes, and selection of the most positive instance.
//!
//! Column 0 of every probability row is the negative class, column 1 the
//! positive class. The noisy-OR bag probability serves as a reference for
//! the selection rule and as an opt-in training aggregation.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, zeros_row, Bound, ParamStore};

/// Positive-class column.
pub const POSITIVE: usize = 1;

/// Two-layer perceptron `Linear(D, hidden) -> GELU -> Linear(hidden, 2)`,
/// applied row by row with shared weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpHead<'a> {
    pub prefix: &'a str,
    pub input_dim: usize,
    pub hidden: usize,
}

impl MlpHead<'_> {
    pub fn parameter_shapes(&self) -> Vec<(String, usize, usize)> {
        let p = self.prefix;
        vec![
            (format!("{p}.fc1.weight"), self.hidden, self.input_dim),
            (format!("{p}.fc1.bias"), 1, self.hidden),
            (format!("{p}.fc2.weight"), 2, self.hidden),
            (format!("{p}.fc2.bias"), 1, 2),
        ]
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
        for (name, rows, cols) in self.parameter_shapes() {
            let v = if name.ends_with(".weight") {
                xavier_uniform(rows, cols, rng)
            } else {
                zeros_row(cols)
            };
            store.insert(name, v);
        }
    }

    pub(crate) fn graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let pre = self.prefix;
        let h = g.linear(
            x,
            p.var(&format!("{pre}.fc1.weight")),
            p.var(&format!("{pre}.fc1.bias")),
        );
        let h = g.gelu(h);
        g.linear(
            h,
            p.var(&format!("{pre}.fc2.weight")),
            p.var(&format!("{pre}.fc2.bias")),
        )
    }
}

/// Instance logits `N x 2` for patch tokens `N x D`.
pub fn instance_head(
    tokens: &Array2<f64>,
    head: &MlpHead<'_>,
    params: &ParamStore,
) -> Result<Array2<f64>> {
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("instance features".into()));
    }
    if tokens.ncols() != head.input_dim {
        return Err(Error::Shape(format!(
            "features have {} columns, head expects {}",
            tokens.ncols(),
            head.input_dim
        )));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.leaf(tokens.clone());
    let out = head.graph(&mut g, &bound, x);
    Ok(g.value(out).clone())
}

/// Numerically stable row softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    autodiff::softmax_rows(logits)
}

/// Index and positive probability of the most positive instance; ties go to the smallest index.
pub fn micm_select(probs: &Array2<f64>) -> Result<(usize, f64)> {
    if probs.nrows() == 0 {
        return Err(Error::Empty("instance set".into()));
    }
    let mut best = (0, probs[[0, POSITIVE]]);
    for (i, row) in probs.rows().into_iter().enumerate().skip(1) {
        if row[POSITIVE] > best.1 {
            best = (i, row[POSITIVE]);
        }
    }
    Ok(best)
}

/// [`micm_select`] restricted to instances whose mask bit is set.
pub fn masked_select(probs: &Array2<f64>, patch_mask: &[bool]) -> Result<(usize, f64)> {
    if patch_mask.len() != probs.nrows() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} instances",
            patch_mask.len(),
            probs.nrows()
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in probs.rows().into_iter().enumerate() {
        if !patch_mask[i] {
            continue;
        }
        if best.is_none_or(|(_, p)| row[POSITIVE] > p) {
            best = Some((i, row[POSITIVE]));
        }
    }
    best.ok_or(Error::EmptySelection)
}

/// Output of the selection module for one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceScores {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub selected_index: usize,
    pub selected_prob: f64,
}

impl InstanceScores {
    pub fn from_logits(logits: Array2<f64>) -> Result<Self> {
        if logits.ncols() != 2 {
            return Err(Error::Shape(format!(
                "expected N x 2 logits, got {:?}",
                logits.dim()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("instance logits".into()));
        }
        let probs = softmax_rows(&logits);
        let (selected_index, selected_prob) = micm_select(&probs)?;
        Ok(InstanceScores {
            logits,
            probs,
            selected_index,
            selected_prob,
        })
    }

    pub fn positive_probs(&self) -> Vec<f64> {
        self.probs.column(POSITIVE).to_vec()
    }

    pub fn masked(&self, patch_mask: &[bool]) -> Result<(usize, f64)> {
        masked_select(&self.probs, patch_mask)
    }
}

/// How instance scores become the probability the MIL loss sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Most positive instance only; gradient reaches that row alone.
    #[default]
    Selected,
    /// Noisy-OR over all instances; every row receives gradient.
    NoisyOr,
}

/// `d bag_probability / d p_j = prod_{k != j} (1 - p_k)`.
pub fn bag_probability_grad(instance_probs: &[f64]) -> Vec<f64> {
    (0..instance_probs.len())
        .map(|j| {
            instance_probs
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != j)
                .map(|(_, &p)| 1.0 - p)
                .product()
        })
        .collect()
}

/// Noisy-OR probability that a bag holds at least one positive instance.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BagProbability(pub f64);

impl BagProbability {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn bag_probability(instance_probs: &[f64]) -> Result<BagProbability> {
    let mut none_positive = 1.0;
    for &p in instance_probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(
                "instance probability",
                format!("{p} outside [0, 1]"),
            ));
        }
        none_positive *= 1.0 - p;
    }
    Ok(BagProbability(1.0 - none_positive))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn probs(rows: &[[f64; 2]]) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j])
    }

    fn head_fixture(seed: u64) -> (MlpHead<'static>, ParamStore, Array2<f64>) {
        let head = MlpHead {
            prefix: "micm",
            input_dim: 6,
            hidden: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        head.init_params(&mut rng, &mut store);
        for (_, m) in store.iter_mut() {
            m.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        let x = Array2::from_shape_fn((5, 6), |_| rng.random_range(-2.0..2.0));
        (head, store, x)
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let (head, mut store, x) = head_fixture(1);
        for (_, m) in store.iter_mut() {
            m.fill(0.0);
        }
        let out = instance_head(&x, &head, &store).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_matches_row_loop() {
        let (head, store, x) = head_fixture(2);
        let out = instance_head(&x, &head, &store).unwrap();
        let w1 = store.get("micm.fc1.weight").unwrap();
        let b1 = store.get("micm.fc1.bias").unwrap();
        let w2 = store.get("micm.fc2.weight").unwrap();
        let b2 = store.get("micm.fc2.bias").unwrap();
        for r in 0..x.nrows() {
            let mut hidden = vec![0.0; 3];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut acc = b1[[0, j]];
                for k in 0..6 {
                    acc += w1[[j, k]] * x[[r, k]];
                }
                *h = 0.5 * acc * (1.0 + libm::erf(acc / std::f64::consts::SQRT_2));
            }
            for c in 0..2 {
                let mut acc = b2[[0, c]];
                for (j, h) in hidden.iter().enumerate() {
                    acc += w2[[c, j]] * h;
                }
                assert!((acc - out[[r, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn head_is_row_equivariant() {
        let (head, store, x) = head_fixture(3);
        let out = instance_head(&x, &head, &store).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let xp = Array2::from_shape_fn(x.dim(), |(i, j)| x[[perm[i], j]]);
        let outp = instance_head(&xp, &head, &store).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(outp.row(i), out.row(src));
        }
    }

    #[test]
    fn head_rejects_non_finite() {
        let (head, store, mut x) = head_fixture(4);
        x[[0, 0]] = f64::NAN;
        assert!(matches!(
            instance_head(&x, &head, &store),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&probs(&[[0.0, 0.0], [0.0, 3f64.ln()]]));
        assert_eq!(p.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((p[[1, 0]] - 0.25).abs() < 1e-15);
        assert!((p[[1, 1]] - 0.75).abs() < 1e-15);
        let a = softmax_rows(&probs(&[[0.3, -1.2]]));
        let b = softmax_rows(&probs(&[[100.3, 98.8]]));
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn select_examples() {
        assert_eq!(
            micm_select(&probs(&[[0.2, 0.8], [0.6, 0.4]])).unwrap(),
            (0, 0.8)
        );
        assert_eq!(
            micm_select(&probs(&[[0.5, 0.5], [0.5, 0.5]])).unwrap(),
            (0, 0.5)
        );
        assert!(micm_select(&Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn select_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Array2::from_shape_fn((196, 2), |_| rng.random_range(-4.0..4.0));
        let p = softmax_rows(&logits);
        let (idx, val) = micm_select(&p).unwrap();
        for i in 0..196 {
            assert!(p[[i, 1]] <= val);
            if p[[i, 1]] == val {
                assert!(i >= idx);
            }
        }
    }

    #[test]
    fn masked_examples() {
        let p = probs(&[[0.05, 0.95], [0.3, 0.7], [0.9, 0.1]]);
        assert_eq!(
            masked_select(&p, &[true; 3]).unwrap(),
            micm_select(&p).unwrap()
        );
        assert_eq!(masked_select(&p, &[false, true, true]).unwrap(), (1, 0.7));
        assert_eq!(masked_select(&p, &[false, false, true]).unwrap().0, 2);
        assert!(matches!(
            masked_select(&p, &[false; 3]),
            Err(Error::EmptySelection)
        ));
        assert!(masked_select(&p, &[true; 2]).is_err());
    }

    #[test]
    fn bag_probability_examples() {
        assert_eq!(bag_probability(&[0.0, 0.0, 0.0]).unwrap().value(), 0.0);
        assert_eq!(bag_probability(&[0.3, 1.0, 0.2]).unwrap().value(), 1.0);
        assert!((bag_probability(&[0.5, 0.5]).unwrap().value() - 0.75).abs() < 1e-15);
        assert!(bag_probability(&[1.2]).is_err());
        assert!(bag_probability(&[-0.1]).is_err());
    }

    proptest! {
        #[test]
        fn selection_ignores_logit_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Array2::from_shape_fn((12, 2), |_| rng.random_range(-3.0..3.0));
            let shifted = logits.mapv(|v| v + shift);
            prop_assert_eq!(
                micm_select(&softmax_rows(&logits)).unwrap().0,
                micm_select(&softmax_rows(&shifted)).unwrap().0
            );
        }

        #[test]
        fn bag_probability_monotone(ps in proptest::collection::vec(0.0f64..=1.0, 1..8), i in 0usize..8, bump in 0.0f64..1.0) {
            let i = i % ps.len();
            let base = bag_probability(&ps).unwrap().value();
            let mut up = ps.clone();
            up[i] = (up[i] + bump).min(1.0);
            prop_assert!(bag_probability(&up).unwrap().value() >= base);
        }

        #[test]
        fn single_nonzero_equals_max(n in 1usize..8, i in 0usize..8, p in 0.0f64..=1.0) {
            let mut ps = vec![0.0; n];
            ps[i % n] = p;
            prop_assert!((bag_probability(&ps).unwrap().value() - p).abs() <= f64::EPSILON);
        }
    }
}
