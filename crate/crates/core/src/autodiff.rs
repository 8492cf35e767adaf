//! Minimal reverse-mode differentiation tape over `Array2<f64>` values.
//!
//! Every training objective in this crate is assembled on a [`Tape`]: forward
//! values are computed eagerly as nodes are pushed, and [`Tape::backward`]
//! walks the node list in reverse to accumulate exact gradients. The op set is
//! deliberately small — just what the encoder, estimators, discriminator, and
//! loss terms need. Vectors are rows (`1 x n`), batches are `N x n` matrices,
//! and scalars are `1 x 1`.
//!
//! All ops are smooth on the probe distributions used by the gradient-check
//! suite, so central finite differences agree with the tape to high precision.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Output of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape if `v` never received one.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Array2<f64> {
        match self.grads[v.0] {
            Some(ref g) => g.clone(),
            None => Array2::zeros((rows, cols)),
        }
    }
}

const LOG_EPS: f64 = -16.118_095_650_958_32; // ln(1e-7): floor for log-probability terms

enum Op {
    Leaf,
    /// `a (m,k) . b (k,n)`
    MatMul(Var, Var),
    /// Elementwise sum, same shape.
    Add(Var, Var),
    /// `(m,n) + (1,n)` with the row broadcast over all rows.
    AddRow(Var, Var),
    /// Elementwise difference, same shape.
    Sub(Var, Var),
    /// Elementwise product, same shape.
    Mul(Var, Var),
    /// `(m,n) * (1,n)` with the row broadcast over all rows.
    MulRow(Var, Var),
    /// `(m,1) * (m,n)` with the column broadcast over all columns.
    ColMul(Var, Var),
    /// Elementwise product with a constant (no gradient through the constant).
    MulConst(Var, Array2<f64>),
    /// `k * x + b` elementwise; only the slope matters on the way back.
    AffineConst(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    /// log(sigmoid(x)) elementwise, floored at ln(1e-7).
    LogSigmoid(Var),
    /// log(1 - sigmoid(x)) elementwise, floored at ln(1e-7).
    LogOneMinusSigmoid(Var),
    /// `(m,n) -> (1,n)` column means.
    MeanRows(Var),
    /// `(m,n) -> (1,1)` mean over all entries.
    MeanAll(Var),
    /// Normalize each row to zero mean / unit variance.
    LayerNormRows(Var),
    /// `(m,a) ++ (m,b) -> (m,a+b)`.
    ConcatCols(Var, Var),
    /// Stack `k` rows of shape `(1,n)` into `(k,n)`.
    StackRows(Vec<Var>),
    /// Extract row `i` of a matrix as `(1,n)`.
    Row(Var, usize),
    /// Mean of a list of `(1,1)` scalars.
    AverageScalars(Vec<Var>),
    /// Euclidean distance between two rows -> `(1,1)`.
    Euclidean(Var, Var),
    /// Manhattan distance between two rows -> `(1,1)`.
    Manhattan(Var, Var),
    /// Cosine distance (1 - cosine similarity) between two rows -> `(1,1)`.
    CosineDist(Var, Var),
    /// Mean softmax cross-entropy of `(m,C)` logits against class labels.
    SoftmaxCrossEntropy(Var, Vec<usize>),
    /// Mean diagonal-Gaussian log-likelihood of constant targets `z (N,d)`
    /// under per-row means and log-variances -> `(1,1)`.
    GaussLogLikMean(Var, Var, Array2<f64>),
    /// Contrastive log-ratio upper bound over a batch: mean over pairs of
    /// `loglik(z_i|x_i) - loglik(z_j|x_i)` -> `(1,1)`.
    Club(Var, Var, Array2<f64>),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Forward/backward tape. Nodes are append-only; handles stay valid for the
/// tape's lifetime.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid_scalar(x: f64) -> f64 {
    let v = if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    };
    v.max(LOG_EPS)
}

/// Log-density of `z` under a diagonal Gaussian, one row at a time.
fn gauss_loglik_row(mu: &[f64], logvar: &[f64], z: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..mu.len() {
        let r = z[k] - mu[k];
        acc += r * r * (-logvar[k]).exp() + logvar[k] + (2.0 * std::f64::consts::PI).ln();
    }
    -0.5 * acc
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_row(&mut self, row: &[f64]) -> Var {
        let value = Array2::from_shape_vec((1, row.len()), row.to_vec()).unwrap();
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), value)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(Op::AddRow(a, row), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a, b), value)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[row.0].value;
        self.push(Op::MulRow(a, row), value)
    }

    pub fn col_mul(&mut self, col: Var, a: Var) -> Var {
        let value = &self.nodes[col.0].value * &self.nodes[a.0].value;
        self.push(Op::ColMul(col, a), value)
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let value = &self.nodes[a.0].value * &c;
        self.push(Op::MulConst(a, c), value)
    }

    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| k * x + b);
        self.push(Op::AffineConst(a, k), value)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(log_sigmoid_scalar);
        self.push(Op::LogSigmoid(a), value)
    }

    pub fn log_one_minus_sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| log_sigmoid_scalar(-x));
        self.push(Op::LogOneMinusSigmoid(a), value)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        self.push(Op::MeanRows(a), value)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap();
        self.push(Op::MeanAll(a), Array2::from_elem((1, 1), m))
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) / s);
        }
        self.push(Op::LayerNormRows(a), out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let left = &self.nodes[a.0].value;
        let right = &self.nodes[b.0].value;
        let value = ndarray::concatenate(Axis(1), &[left.view(), right.view()]).unwrap();
        self.push(Op::ConcatCols(a, b), value)
    }

    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        let views: Vec<_> = rows.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).unwrap();
        self.push(Op::StackRows(rows), value)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .row(i)
            .to_owned()
            .insert_axis(Axis(0));
        self.push(Op::Row(a, i), value)
    }

    pub fn average_scalars(&mut self, parts: Vec<Var>) -> Var {
        let m = parts.iter().map(|v| self.scalar(*v)).sum::<f64>() / parts.len() as f64;
        self.push(Op::AverageScalars(parts), Array2::from_elem((1, 1), m))
    }

    pub fn euclidean(&mut self, a: Var, b: Var) -> Var {
        let d = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let c = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Op::Euclidean(a, b), Array2::from_elem((1, 1), c))
    }

    pub fn manhattan(&mut self, a: Var, b: Var) -> Var {
        let d = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let c = d.iter().map(|v| v.abs()).sum::<f64>();
        self.push(Op::Manhattan(a, b), Array2::from_elem((1, 1), c))
    }

    pub fn cosine_dist(&mut self, a: Var, b: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        let dot = (x * y).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = 1.0 - dot / (nx * ny);
        self.push(Op::CosineDist(a, b), Array2::from_elem((1, 1), c))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let x = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[labels[i]];
        }
        let value = Array2::from_elem((1, 1), total / labels.len() as f64);
        self.push(Op::SoftmaxCrossEntropy(logits, labels), value)
    }

    pub fn gauss_loglik_mean(&mut self, mu: Var, logvar: Var, z: Array2<f64>) -> Var {
        let m = &self.nodes[mu.0].value;
        let lv = &self.nodes[logvar.0].value;
        let n = m.nrows();
        let mut total = 0.0;
        for i in 0..n {
            total += gauss_loglik_row(
                m.row(i).as_slice().unwrap(),
                lv.row(i).as_slice().unwrap(),
                z.row(i).as_slice().unwrap(),
            );
        }
        let value = Array2::from_elem((1, 1), total / n as f64);
        self.push(Op::GaussLogLikMean(mu, logvar, z), value)
    }

    /// Batch estimate `(1/N^2) sum_i sum_j [loglik(z_i|x_i) - loglik(z_j|x_i)]`,
    /// algebraically equal to the positive-minus-marginal form and exactly zero
    /// when all `z_j` coincide.
    pub fn club(&mut self, mu: Var, logvar: Var, z: Array2<f64>) -> Var {
        let m = &self.nodes[mu.0].value;
        let lv = &self.nodes[logvar.0].value;
        let n = m.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let mu_i = m.row(i);
            let lv_i = lv.row(i);
            let ll_ii = gauss_loglik_row(
                mu_i.as_slice().unwrap(),
                lv_i.as_slice().unwrap(),
                z.row(i).as_slice().unwrap(),
            );
            for j in 0..n {
                let ll_ij = gauss_loglik_row(
                    mu_i.as_slice().unwrap(),
                    lv_i.as_slice().unwrap(),
                    z.row(j).as_slice().unwrap(),
                );
                total += ll_ii - ll_ij;
            }
        }
        let value = Array2::from_elem((1, 1), total / (n * n) as f64);
        self.push(Op::Club(mu, logvar, z), value)
    }

    /// Reverse pass from a scalar target, seeded with 1.
    pub fn backward(&self, target: Var) -> Gradients {
        let shape = self.nodes[target.0].value.dim();
        assert_eq!(shape, (1, 1), "backward target must be a scalar node");
        self.backward_seeded(target, Array2::ones((1, 1)))
    }

    /// Reverse pass from any node with an explicit seed gradient.
    pub fn backward_seeded(&self, target: Var, seed: Array2<f64>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(seed);
        for idx in (0..=target.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        fn addto(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
            match grads[v.0] {
                Some(ref mut acc) => *acc += &delta,
                None => grads[v.0] = Some(delta),
            }
        }
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                addto(grads, *a, g.dot(&bv.t()));
                addto(grads, *b, av.t().dot(g));
            }
            Op::Add(a, b) => {
                addto(grads, *a, g.clone());
                addto(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                addto(grads, *a, g.clone());
                addto(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                addto(grads, *a, g.clone());
                addto(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                addto(grads, *a, g * &self.nodes[b.0].value);
                addto(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::MulRow(a, row) => {
                addto(grads, *a, g * &self.nodes[row.0].value);
                let da = g * &self.nodes[a.0].value;
                addto(grads, *row, da.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::ColMul(col, a) => {
                let da = g * &self.nodes[col.0].value;
                addto(grads, *a, da);
                let dc = (g * &self.nodes[a.0].value)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                addto(grads, *col, dc);
            }
            Op::MulConst(a, c) => addto(grads, *a, g * c),
            Op::AffineConst(a, k) => addto(grads, *a, g.mapv(|v| v * k)),
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                addto(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                addto(grads, *a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::LogSigmoid(a) => {
                // d/dx log sigmoid(x) = 1 - sigmoid(x); zero where floored
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[idx].value;
                let mut d = x.mapv(|v| 1.0 - sigmoid_scalar(v));
                d.zip_mut_with(y, |dv, yv| {
                    if *yv <= LOG_EPS {
                        *dv = 0.0;
                    }
                });
                addto(grads, *a, g * &d);
            }
            Op::LogOneMinusSigmoid(a) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[idx].value;
                let mut d = x.mapv(|v| -sigmoid_scalar(v));
                d.zip_mut_with(y, |dv, yv| {
                    if *yv <= LOG_EPS {
                        *dv = 0.0;
                    }
                });
                addto(grads, *a, g * &d);
            }
            Op::MeanRows(a) => {
                let m = self.nodes[a.0].value.nrows() as f64;
                let d = g.mapv(|v| v / m);
                let full = d
                    .broadcast(self.nodes[a.0].value.dim())
                    .unwrap()
                    .to_owned();
                addto(grads, *a, full);
            }
            Op::MeanAll(a) => {
                let (r, c) = self.nodes[a.0].value.dim();
                let scale = g[(0, 0)] / (r * c) as f64;
                addto(grads, *a, Array2::from_elem((r, c), scale));
            }
            Op::LayerNormRows(a) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[idx].value;
                let mut out = Array2::zeros(x.dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let n = row.len() as f64;
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let s = (var + LN_EPS).sqrt();
                    let gi = g.row(i);
                    let yi = y.row(i);
                    let g_mean = gi.sum() / n;
                    let gy_mean = gi
                        .iter()
                        .zip(yi.iter())
                        .map(|(gv, yv)| gv * yv)
                        .sum::<f64>()
                        / n;
                    for k in 0..row.len() {
                        out[(i, k)] = (gi[k] - g_mean - yi[k] * gy_mean) / s;
                    }
                }
                addto(grads, *a, out);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.ncols();
                addto(grads, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                addto(grads, *b, g.slice(ndarray::s![.., ca..]).to_owned());
            }
            Op::StackRows(rows) => {
                for (i, v) in rows.iter().enumerate() {
                    addto(grads, *v, g.row(i).to_owned().insert_axis(Axis(0)));
                }
            }
            Op::Row(a, i) => {
                let mut d = Array2::zeros(self.nodes[a.0].value.dim());
                d.row_mut(*i).assign(&g.row(0));
                addto(grads, *a, d);
            }
            Op::AverageScalars(parts) => {
                let scale = g[(0, 0)] / parts.len() as f64;
                for v in parts {
                    addto(grads, *v, Array2::from_elem((1, 1), scale));
                }
            }
            Op::Euclidean(a, b) => {
                let c = self.nodes[idx].value[(0, 0)];
                let d = &self.nodes[a.0].value - &self.nodes[b.0].value;
                if c > 0.0 {
                    let da = d.mapv(|v| g[(0, 0)] * v / c);
                    addto(grads, *b, -da.clone());
                    addto(grads, *a, da);
                }
                // c == 0: subgradient convention, no contribution
            }
            Op::Manhattan(a, b) => {
                let d = &self.nodes[a.0].value - &self.nodes[b.0].value;
                let da = d.mapv(|v| g[(0, 0)] * v.signum());
                addto(grads, *b, -da.clone());
                addto(grads, *a, da);
            }
            Op::CosineDist(a, b) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[b.0].value;
                let dot = (x * y).sum();
                let nx2 = x.iter().map(|v| v * v).sum::<f64>();
                let ny2 = y.iter().map(|v| v * v).sum::<f64>();
                let nx = nx2.sqrt();
                let ny = ny2.sqrt();
                let s = g[(0, 0)];
                // d(1 - x.y/(|x||y|))/dx = dot*x/(|x|^3 |y|) - y/(|x||y|)
                let da = x.mapv(|v| s * dot * v / (nx2 * nx * ny)) - y.mapv(|v| s * v / (nx * ny));
                let db = y.mapv(|v| s * dot * v / (ny2 * ny * nx)) - x.mapv(|v| s * v / (nx * ny));
                addto(grads, *a, da);
                addto(grads, *b, db);
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let x = &self.nodes[logits.0].value;
                let n = labels.len() as f64;
                let mut d = Array2::zeros(x.dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for k in 0..exps.len() {
                        let p = exps[k] / sum;
                        let t = if k == labels[i] { 1.0 } else { 0.0 };
                        d[(i, k)] = g[(0, 0)] * (p - t) / n;
                    }
                }
                addto(grads, *logits, d);
            }
            Op::GaussLogLikMean(mu, logvar, z) => {
                let m = &self.nodes[mu.0].value;
                let lv = &self.nodes[logvar.0].value;
                let n = m.nrows() as f64;
                let s = g[(0, 0)] / n;
                let mut dmu = Array2::zeros(m.dim());
                let mut dlv = Array2::zeros(lv.dim());
                for i in 0..m.nrows() {
                    for k in 0..m.ncols() {
                        let r = z[(i, k)] - m[(i, k)];
                        let inv = (-lv[(i, k)]).exp();
                        dmu[(i, k)] = s * r * inv;
                        dlv[(i, k)] = s * 0.5 * (r * r * inv - 1.0);
                    }
                }
                addto(grads, *mu, dmu);
                addto(grads, *logvar, dlv);
            }
            Op::Club(mu, logvar, z) => {
                let m = &self.nodes[mu.0].value;
                let lv = &self.nodes[logvar.0].value;
                let n = m.nrows();
                let s = g[(0, 0)] / (n * n) as f64;
                let mut dmu = Array2::zeros(m.dim());
                let mut dlv = Array2::zeros(lv.dim());
                for i in 0..n {
                    for k in 0..m.ncols() {
                        let inv = (-lv[(i, k)]).exp();
                        let ri = z[(i, k)] - m[(i, k)];
                        let mut sum_r = 0.0;
                        let mut sum_r2 = 0.0;
                        for j in 0..n {
                            let rj = z[(j, k)] - m[(i, k)];
                            sum_r += rj;
                            sum_r2 += rj * rj;
                        }
                        let nf = n as f64;
                        dmu[(i, k)] = s * inv * (nf * ri - sum_r);
                        dlv[(i, k)] = s * 0.5 * inv * (nf * ri * ri - sum_r2);
                    }
                }
                addto(grads, *mu, dmu);
                addto(grads, *logvar, dlv);
            }
        }
    }
}

// Variance floor for layer normalization; small enough that normalized rows
// hit zero mean / unit variance well within the 1e-5 contract.
const LN_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randn(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    /// Flatten leaves -> scalar loss, checked against central differences.
    fn check_graph<F>(leaves: Vec<Array2<f64>>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);

        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[li], leaf.nrows(), leaf.ncols());
            for r in 0..leaf.nrows() {
                for c in 0..leaf.ncols() {
                    let fd = central_diff(1e-6, |eps| {
                        let mut peturbed = leaves.clone();
                        peturbed[li][(r, c)] += eps;
                        let mut t = Tape::new();
                        let vs: Vec<Var> = peturbed.iter().map(|l| t.leaf(l.clone())).collect();
                        let out = build(&mut t, &vs);
                        t.scalar(out)
                    });
                    let a = analytic[(r, c)];
                    let denom = a.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (a - fd).abs() / denom < tol,
                        "leaf {li} ({r},{c}): analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn dense_tanh_layer_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = randn(&mut rng, 3, 4);
        let w = randn(&mut rng, 4, 5);
        let b = randn(&mut rng, 1, 5);
        check_graph(
            vec![x, w, b],
            |t, v| {
                let h = t.matmul(v[0], v[1]);
                let h = t.add_row(h, v[2]);
                let h = t.tanh(h);
                t.mean_all(h)
            },
            1e-6,
        );
    }

    #[test]
    fn layer_norm_and_row_scaling_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = randn(&mut rng, 4, 6);
        let gamma = randn(&mut rng, 1, 6);
        let beta = randn(&mut rng, 1, 6);
        check_graph(
            vec![x, gamma, beta],
            |t, v| {
                let n = t.layer_norm_rows(v[0]);
                let n = t.mul_row(n, v[1]);
                let n = t.add_row(n, v[2]);
                let s = t.sigmoid(n);
                t.mean_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn distance_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = randn(&mut rng, 1, 7);
            let b = randn(&mut rng, 1, 7);
            check_graph(
                vec![a.clone(), b.clone()],
                |t, v| {
                    let e = t.euclidean(v[0], v[1]);
                    let c = t.cosine_dist(v[0], v[1]);
                    t.add(e, c)
                },
                1e-5,
            );
            check_graph(vec![a, b], |t, v| t.manhattan(v[0], v[1]), 1e-5);
        }
    }

    #[test]
    fn cross_entropy_and_stack_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = randn(&mut rng, 1, 5);
        let b = randn(&mut rng, 1, 5);
        let w = randn(&mut rng, 5, 3);
        check_graph(
            vec![a, b, w],
            |t, v| {
                let batch = t.stack_rows(vec![v[0], v[1]]);
                let logits = t.matmul(batch, v[2]);
                t.softmax_cross_entropy(logits, vec![0, 2])
            },
            1e-6,
        );
    }

    #[test]
    fn gauss_and_club_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mu = randn(&mut rng, 4, 3);
        let lv = randn(&mut rng, 4, 3).mapv(|v| v * 0.3);
        let z = randn(&mut rng, 4, 3);
        let z2 = z.clone();
        check_graph(
            vec![mu.clone(), lv.clone()],
            move |t, v| t.gauss_loglik_mean(v[0], v[1], z.clone()),
            1e-6,
        );
        check_graph(vec![mu, lv], move |t, v| t.club(v[0], v[1], z2.clone()), 1e-6);
    }

    #[test]
    fn gate_fusion_graph_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let e = randn(&mut rng, 3, 4);
        let q = randn(&mut rng, 3, 4);
        let wg = randn(&mut rng, 8, 1);
        check_graph(
            vec![e, q, wg],
            |t, v| {
                let cat = t.concat_cols(v[0], v[1]);
                let u = t.matmul(cat, v[2]);
                let a = t.sigmoid(u);
                let one_minus = t.affine(a, -1.0, 1.0);
                let left = t.col_mul(a, v[0]);
                let right = t.col_mul(one_minus, v[1]);
                let fused = t.add(left, right);
                t.mean_all(fused)
            },
            1e-6,
        );
    }

    #[test]
    fn log_sigmoid_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let u = randn(&mut rng, 5, 1);
        check_graph(
            vec![u],
            |t, v| {
                let a = t.log_sigmoid(v[0]);
                let b = t.log_one_minus_sigmoid(v[0]);
                let s = t.add(a, b);
                t.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn club_is_exactly_zero_for_constant_targets() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mu = randn(&mut rng, 6, 4);
        let lv = randn(&mut rng, 6, 4);
        let z = Array2::from_elem((6, 4), 0.37);
        let mut tape = Tape::new();
        let m = tape.leaf(mu);
        let v = tape.leaf(lv);
        let c = tape.club(m, v, z);
        assert_eq!(tape.scalar(c), 0.0);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = randn(&mut rng, 3, 32).mapv(|v| v * 4.0 + 1.5);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let n = tape.layer_norm_rows(v);
        for row in tape.value(n).rows() {
            let len = row.len() as f64;
            let mean = row.sum() / len;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
