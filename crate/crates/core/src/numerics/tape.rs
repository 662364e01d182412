//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records each primitive as it is evaluated. Parents always
//! precede children, so a single reverse sweep over the record accumulates
//! exact adjoints. A tape belongs to one evaluation and is dropped afterwards.

use super::tensor::{matmul_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// `x * sigmoid(x)`; smooth with a continuous derivative.
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "silu" => Some(Activation::Silu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Activate(Var, Activation),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    PickPerRow(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(..) => "square",
            Op::MatMul(..) => "matmul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Activate(_, a) => a.name(),
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::PickPerRow(..) => "pick_per_row",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    first_non_finite: Option<&'static str>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for leaf `v`; zeros when `v` did not influence the output.
    /// Adjoints of interior nodes are released during the sweep.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.adjoints[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.adjoints[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(op.name());
        }
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Name of the first primitive whose output contained NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "shape mismatch in {op}"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.values[a.0].add(&self.values[b.0]).expect("checked");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.values[a.0].sub(&self.values[b.0]).expect("checked");
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.values[a.0].mul(&self.values[b.0]).expect("checked");
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.values[a.0].map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Panics on incompatible inner dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0]
            .matmul(&self.values[b.0])
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let v = self.values[a.0]
            .add_row_bias(&self.values[bias.0])
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::AddRowBias(a, bias))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        let v = self.values[a.0].map(|x| act.apply(x));
        self.push(v, Op::Activate(a, act))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Tanh)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Silu)
    }

    /// Row-wise stabilized log-softmax (a vector is one row).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.values[a.0].log_softmax_rows();
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.values[a.0].sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Selects `a[i, indices[i]]` from each row, giving a vector.
    pub fn pick_per_row(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let t = &self.values[a.0];
        let (m, n) = (t.rows(), t.cols());
        assert_eq!(indices.len(), m, "pick_per_row: one index per row");
        let data = indices
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < n, "pick_per_row: index {j} >= {n}");
                t.data()[i * n + j]
            })
            .collect();
        let v = Tensor::vector(data);
        self.push(v, Op::PickPerRow(a, indices))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let t = &self.values[table.0];
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            assert!(i < r, "gather_rows: index {i} >= {r}");
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::matrix(indices.len(), c, data);
        self.push(v, Op::GatherRows(table, indices))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let m = self.values[parts[0].0].rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let t = &self.values[p.0];
                assert_eq!(t.rows(), m, "concat_cols: row count");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in &parts {
                data.extend_from_slice(self.values[p.0].row(i));
            }
        }
        let v = Tensor::matrix(m, total, data);
        self.push(v, Op::ConcatCols(parts))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check_finite()?;
        assert_eq!(
            self.values[output.0].len(),
            1,
            "backward needs a scalar output"
        );
        let n = output.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.values.len()];
        adj[output.0] = Some(Tensor::full(self.values[output.0].shape(), 1.0));

        for idx in (0..n).rev() {
            let Some(g) = adj[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.scale(-1.0);
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, neg);
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&self.values[b.0]).expect("shape");
                    let gb = g.mul(&self.values[a.0]).expect("shape");
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.scale(*c)),
                Op::Square(a) => {
                    let ga = g.zip_map(&self.values[a.0], "square", |g, x| 2.0 * x * g).expect("shape");
                    accumulate(&mut adj, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let av = &self.values[a.0];
                    let bv = &self.values[b.0];
                    let (m, k) = (av.rows(), av.cols());
                    let nn = bv.cols();
                    // dA = G B^T
                    let bt = bv.transpose();
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut ga, m, nn, k);
                    // dB = A^T G
                    let mut gb = vec![0.0; k * nn];
                    matmul_tn_into(av.data(), g.data(), &mut gb, m, k, nn);
                    let ga = Tensor::new(av.shape().to_vec(), ga).expect("shape");
                    let gb = Tensor::new(bv.shape().to_vec(), gb).expect("shape");
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRowBias(a, bias) => {
                    let cols = g.cols();
                    let mut gb = vec![0.0; cols];
                    for row in g.data().chunks_exact(cols) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let gb = Tensor::new(self.values[bias.0].shape().to_vec(), gb).expect("shape");
                    accumulate(&mut adj, *bias, gb);
                    accumulate(&mut adj, *a, g);
                }
                Op::Activate(a, act) => {
                    let ga = g
                        .zip_map(&self.values[a.0], "activate", |g, x| g * act.derivative(x))
                        .expect("shape");
                    accumulate(&mut adj, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    // d/dx_j sum_i g_i (x_i - lse) = g_j - softmax_j * sum_i g_i
                    let out = &self.values[idx];
                    let cols = out.cols();
                    let mut ga = g.clone();
                    for (grow, orow) in ga
                        .data_mut()
                        .chunks_exact_mut(cols)
                        .zip(out.data().chunks_exact(cols))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for (gv, lp) in grow.iter_mut().zip(orow) {
                            *gv -= lp.exp() * gsum;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.values[a.0].shape(), g.item());
                    accumulate(&mut adj, *a, ga);
                }
                Op::Mean(a) => {
                    let t = &self.values[a.0];
                    let ga = Tensor::full(t.shape(), g.item() / t.len() as f64);
                    accumulate(&mut adj, *a, ga);
                }
                Op::PickPerRow(a, indices) => {
                    let t = &self.values[a.0];
                    let cols = t.cols();
                    let mut ga = Tensor::zeros(t.shape());
                    for (i, &j) in indices.iter().enumerate() {
                        ga.data_mut()[i * cols + j] = g.data()[i];
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::GatherRows(table, indices) => {
                    let t = &self.values[table.0];
                    let cols = t.cols();
                    let mut gt = Tensor::zeros(t.shape());
                    for (i, &r) in indices.iter().enumerate() {
                        let src = g.row(i);
                        let dst = &mut gt.data_mut()[r * cols..(r + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut adj, *table, gt);
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let mut offset = 0;
                    for p in parts {
                        let pt = &self.values[p.0];
                        let w = pt.cols();
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        let gp = Tensor::new(pt.shape().to_vec(), data).expect("shape");
                        accumulate(&mut adj, *p, gp);
                    }
                }
            }
        }

        for (i, a) in adj.iter().enumerate() {
            if let Some(t) = a {
                if !t.is_finite() {
                    return Err(Error::NonFinite {
                        op: self.ops[i].name(),
                    });
                }
            }
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
