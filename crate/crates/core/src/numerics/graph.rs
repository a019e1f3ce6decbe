//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse sweep.
//! Leaves borrow parameter tensors for the lifetime `'p` instead of copying
//! them into every graph.

use std::borrow::Cow;

use crate::error::{shape_err, Error, Result};

use super::scalar::Scalar;
use super::tensor::{self, matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    PairwiseAdd {
        a: Var,
        b: Var,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
    /// Scalar produced by an external routine that also supplied its gradient.
    External {
        input: Var,
        grad: Vec<f64>,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient (frozen parameters, inputs).
    pub fn frozen(&mut self, t: &'p Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An owned leaf that does receive gradient (used by gradient checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = self.value(x).add_row(self.value(row))?;
        Ok(self.push(v, Op::AddRow(x, row), &[x, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = tensor::softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = tensor::log_softmax_rows(self.value(x));
        self.push(v, Op::LogSoftmaxRows(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, xhat, rstd) =
            tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_rows(&vals)?
        };
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&vals)?
        };
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table).gather_rows(ids)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// All pairwise row sums: row `r * S + s` of the result is `a[r] + b[s]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err(format!(
                "pairwise add of widths {} and {}",
                av.cols(),
                bv.cols()
            )));
        }
        let (r, s, c) = (av.rows(), bv.rows(), av.cols());
        let mut data = Vec::with_capacity(r * s * c);
        for i in 0..r {
            let ar = av.row(i);
            for j in 0..s {
                data.extend(ar.iter().zip(bv.row(j)).map(|(&x, &y)| x + y));
            }
        }
        let v = Tensor::matrix(r * s, c, data)?;
        Ok(self.push(v, Op::PairwiseAdd { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// `Σ w_i · x_i` over same-shaped inputs, evaluated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let first = terms.first().ok_or(Error::EmptyReduction)?.0;
        let mut acc = Tensor::zeros(self.value(first).shape());
        for &(v, w) in terms {
            let t = self.value(v).map(|x| x * w);
            acc.add_assign(&t)?;
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(acc, Op::WeightedSum(terms.to_vec()), &parents))
    }

    /// Records a scalar computed outside the graph from `input`, together with
    /// its gradient with respect to `input`.
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(shape_err(format!(
                "external gradient of {} for input of {}",
                grad.len(),
                self.value(input).numel()
            )));
        }
        Ok(self.push(
            Tensor::scalar(T::of(value)),
            Op::External { input, grad },
            &[input],
        ))
    }

    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        self.backward_with_seed(output, &Tensor::scalar(T::one()))
    }

    pub fn backward_with_seed(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.numel() != 1 {
            return Err(Error::NonScalarSeed(seed.shape().to_vec()));
        }
        if self.value(output).numel() != 1 {
            return Err(Error::NonScalarSeed(self.value(output).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), seed.data()[0]));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs_grad(a) {
                    let da = if ta {
                        matmul(bv, dy, tb, true)?
                    } else {
                        matmul(dy, bv, false, !tb)?
                    };
                    self.accumulate(grads, a, da)?;
                }
                if self.needs_grad(b) {
                    let db = if tb {
                        matmul(dy, av, true, ta)?
                    } else {
                        matmul(av, dy, !ta, false)?
                    };
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, dy.clone())?;
                self.accumulate(grads, b, dy.clone())?;
            }
            &Op::AddRow(x, row) => {
                self.accumulate(grads, x, dy.clone())?;
                if self.needs_grad(row) {
                    let c = dy.cols();
                    let mut db = vec![T::zero(); c];
                    for i in 0..dy.rows() {
                        for (d, &g) in db.iter_mut().zip(dy.row(i)) {
                            *d += g;
                        }
                    }
                    let shape = self.value(row).shape().to_vec();
                    self.accumulate(grads, row, Tensor::new(shape, db)?)?;
                }
            }
            &Op::Mul(a, b) => {
                if self.needs_grad(a) {
                    let da = dy.zip_map(self.value(b), |g, x| g * x)?;
                    self.accumulate(grads, a, da)?;
                }
                if self.needs_grad(b) {
                    let db = dy.zip_map(self.value(a), |g, x| g * x)?;
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Scale(x, s) => {
                self.accumulate(grads, x, dy.map(|g| g * s))?;
            }
            &Op::Tanh(x) => {
                let dx = dy.zip_map(y, |g, t| g * (T::one() - t * t))?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::Sigmoid(x) => {
                let dx = dy.zip_map(y, |g, s| g * s * (T::one() - s))?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::Gelu(x) => {
                let dx = dy.zip_map(self.value(x), |g, v| g * tensor::gelu_grad(v))?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::SoftmaxRows(x) => {
                let mut dx = dy.clone();
                for i in 0..dy.rows() {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, x, dx)?;
            }
            &Op::LogSoftmaxRows(x) => {
                let mut dx = dy.clone();
                for i in 0..dy.rows() {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let total: T = gr.iter().copied().sum();
                    for ((d, &lp), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = gv - lp.exp() * total;
                    }
                }
                self.accumulate(grads, x, dx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = dy.cols();
                let gv = self.value(*gain);
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let mut dx = Tensor::zeros(dy.shape());
                let inv_c = T::of(1.0 / c as f64);
                for i in 0..dy.rows() {
                    let (gr, hr) = (dy.row(i), xhat.row(i));
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..c {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        let dh = gr[j] * gv.data()[j];
                        mean_d += dh;
                        mean_dh += dh * hr[j];
                    }
                    mean_d *= inv_c;
                    mean_dh *= inv_c;
                    let r = rstd[i];
                    let out = dx.row_mut(i);
                    for j in 0..c {
                        let dh = gr[j] * gv.data()[j];
                        out[j] = r * (dh - mean_d - hr[j] * mean_dh);
                    }
                }
                self.accumulate(grads, *x, dx)?;
                let gshape = gv.shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(gshape, dg)?)?;
                self.accumulate(grads, *bias, Tensor::new(bshape, db)?)?;
            }
            &Op::SliceRows { x, start } => {
                if self.needs_grad(x) {
                    let xv = self.value(x);
                    let c = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    dx.data_mut()[start * c..start * c + dy.numel()].copy_from_slice(dy.data());
                    self.accumulate(grads, x, dx)?;
                }
            }
            &Op::SliceCols { x, start } => {
                if self.needs_grad(x) {
                    let xv = self.value(x);
                    let len = dy.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for i in 0..dy.rows() {
                        dx.row_mut(i)[start..start + len].copy_from_slice(dy.row(i));
                    }
                    self.accumulate(grads, x, dx)?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs_grad(p) {
                        let part = dy.slice_rows(offset, rows)?;
                        self.accumulate(grads, p, part)?;
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs_grad(p) {
                        let part = dy.slice_cols(offset, cols)?;
                        self.accumulate(grads, p, part)?;
                    }
                    offset += cols;
                }
            }
            Op::Gather { table, ids } => {
                if self.needs_grad(*table) {
                    let mut dt = Tensor::zeros(self.value(*table).shape());
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, &g) in dt.row_mut(id).iter_mut().zip(dy.row(i)) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *table, dt)?;
                }
            }
            &Op::PairwiseAdd { a, b } => {
                let (r, s) = (self.value(a).rows(), self.value(b).rows());
                let mut da = Tensor::zeros(self.value(a).shape());
                let mut dbt = Tensor::zeros(self.value(b).shape());
                for i in 0..r {
                    for j in 0..s {
                        let g = dy.row(i * s + j);
                        for (d, &v) in da.row_mut(i).iter_mut().zip(g) {
                            *d += v;
                        }
                        for (d, &v) in dbt.row_mut(j).iter_mut().zip(g) {
                            *d += v;
                        }
                    }
                }
                self.accumulate(grads, a, da)?;
                self.accumulate(grads, b, dbt)?;
            }
            &Op::Sum(x) => {
                let g = dy.data()[0];
                self.accumulate(grads, x, Tensor::full(self.value(x).shape(), g))?;
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, dy.map(|g| g * w))?;
                }
            }
            Op::External { input, grad } => {
                let g = dy.data()[0];
                let shape = self.value(*input).shape().to_vec();
                let dx = grad.iter().map(|&d| g * T::of(d)).collect();
                self.accumulate(grads, *input, Tensor::new(shape, dx)?)?;
            }
        }
        Ok(())
    }
}
