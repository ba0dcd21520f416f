//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] with upstream gradients for one or more outputs walks the
//! tape in reverse and returns the gradient of every node. The op set is just
//! what a ViT encoder and its heads need.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`, the layout of a linear layer with `(out, in)` weights.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// `x W^T + b` with `W: (out, in)` and `b: (1, out)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul_t(x, weight);
        self.add_row(y, bias)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Reverse pass seeded with `d(loss)/d(output)` for each listed output.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(*v).dim(), "seed shape");
            accumulate(&mut grads, *v, g.clone());
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g * *s),
                Op::Gelu(a) => {
                    let mut ga = self.value(*a).mapv(gelu_grad);
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dx_row = dxhat.row(r);
                        let xh_row = xhat.row(r);
                        let sum_d = dx_row.sum();
                        let sum_dx = dx_row.dot(&xh_row);
                        let k = inv_std[r] / d;
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = k * (d * dx_row[c] - sum_d - xh_row[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = g.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(
                            &mut grads,
                            *p,
                            g.slice(s![.., offset..offset + w]).to_owned(),
                        );
                        offset += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        accumulate(
                            &mut grads,
                            *p,
                            g.slice(s![offset..offset + h, ..]).to_owned(),
                        );
                        offset += h;
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients(grads)
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`]; nodes the seeds do not reach have no gradient.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Mat>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks every input entry of a scalar function `sum(out * weights)` by central differences.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Graph, &[Var]) -> Var, rng: &mut impl Rng) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let out = build(&mut g, &vars);
        let w = random(g.value(out).nrows(), g.value(out).ncols(), rng);
        let grads = g.backward(&[(out, w.clone())]);
        let eval = |inputs: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
            let out = build(&mut g, &vars);
            (g.value(out) * &w).sum()
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(m.dim()));
            for idx in 0..m.len() {
                let (r, c) = (idx / m.ncols(), idx % m.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "input {k} entry ({r},{c}): analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_and_linear() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(3, 4, &mut rng), random(4, 2, &mut rng)];
        check(inputs, |g, v| g.matmul(v[0], v[1]), &mut rng);
        let inputs = vec![
            random(3, 4, &mut rng),
            random(5, 4, &mut rng),
            random(1, 5, &mut rng),
        ];
        check(inputs, |g, v| g.linear(v[0], v[1], v[2]), &mut rng);
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(3, 4, &mut rng), random(3, 4, &mut rng)];
        check(
            inputs,
            |g, v| {
                let s = g.add(v[0], v[1]);
                let s = g.scale(s, 1.7);
                g.gelu(s)
            },
            &mut rng,
        );
    }

    #[test]
    fn layer_norm_and_softmax() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            random(3, 6, &mut rng),
            random(1, 6, &mut rng),
            random(1, 6, &mut rng),
        ];
        check(inputs, |g, v| g.layer_norm(v[0], v[1], v[2]), &mut rng);
        let inputs = vec![random(4, 5, &mut rng)];
        check(inputs, |g, v| g.softmax_rows(v[0]), &mut rng);
    }

    #[test]
    fn slicing_and_concatenation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(4, 6, &mut rng), random(1, 6, &mut rng)];
        check(
            inputs,
            |g, v| {
                let a = g.slice_cols(v[0], 1, 3);
                let b = g.slice_cols(v[0], 4, 2);
                let c = g.concat_cols(&[b, a]);
                let r = g.concat_rows(&[v[1], v[0]]);
                let r = g.slice_rows(r, 0, 4);
                let r = g.slice_cols(r, 0, 5);
                g.matmul_t(c, r)
            },
            &mut rng,
        );
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Mat::from_elem((1, 1), 3.0));
        let y = g.matmul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(&[(z, Mat::from_elem((1, 1), 1.0))]);
        // d(x^2 + x)/dx = 2x + 1
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 7.0);
    }

    #[test]
    fn softmax_is_stable_and_normalized() {
        let x = Mat::from_shape_vec((2, 2), vec![1000.0, 1001.0, -5.0, -5.0]).unwrap();
        let y = softmax_rows(&x);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[[1, 0]] - 0.5).abs() < 1e-15);
        assert!((y.row(0).sum() - 1.0).abs() < 1e-15);
    }
}
