//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value is an `Array2<f64>`; scalars are 1x1. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (n x m) + r (1 x m)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (n x m) * r (1 x m)` broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Relu(Var),
    Silu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    /// Normalized output is the node value; per-row inverse std is saved.
    LayerNormRows(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    /// Column sums, `n x m -> 1 x m`.
    SumRows(Var),
    /// Euclidean norm of each row, `n x m -> n x 1`.
    RowNorms(Var),
    Columns(Var, usize),
    ConcatCols(Vec<Var>),
    /// `D[i, j] = |a_i - b_j|`
    PairwiseDist(Var, Var),
    /// `D[i, j] = |a_i - b_j|^2`
    PairwiseSqDist(Var, Var),
    /// Mask already carries the `1 / (1 - rate)` scaling.
    Dropout(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
    corrupt_backward: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                store.grad_mut(id).scaled_add(1.0, g);
            }
        }
    }
}

fn row_broadcast_grad(g: &Array2<f64>) -> Array2<f64> {
    g.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negative-control hook: drops a term from the layer-norm backward rule.
    pub fn set_corrupt_backward(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that receives a gradient but is not a parameter.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter; repeated calls for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.push((id, v));
        v
    }

    /// Copies a node's value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x m row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1 x m row");
        let value = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// `max(x, 0)` with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (1.0 + (-x).exp()), Op::Silu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Per-row normalization to zero mean and unit variance, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let m = value.ncols() as f64;
        let mut inv_std = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / m;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / m;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNormRows(a, inv_std), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = row_broadcast_grad(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SumRows(a), ng)
    }

    pub fn row_norms(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::RowNorms(a), ng)
    }

    /// Columns `start .. start + len`.
    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Columns(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    fn pairwise(&self, a: Var, b: Var, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ncols(), bv.ncols(), "pairwise: column counts differ");
        let mut out = Array2::zeros((av.nrows(), bv.nrows()));
        for (i, ar) in av.rows().into_iter().enumerate() {
            for (j, br) in bv.rows().into_iter().enumerate() {
                let sq: f64 = ar.iter().zip(br.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                out[[i, j]] = f(sq);
            }
        }
        out
    }

    /// Euclidean distance matrix; the gradient at coincident points is 0.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Var {
        let value = self.pairwise(a, b, f64::sqrt);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::PairwiseDist(a, b), ng)
    }

    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let value = self.pairwise(a, b, |sq| sq);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::PairwiseSqDist(a, b), ng)
    }

    /// Inverted dropout with a caller-drawn keep mask (entries 0 or 1).
    pub fn dropout(&mut self, a: Var, keep: &Array2<bool>, rate: f64) -> Var {
        let scale = 1.0 / (1.0 - rate);
        let mask = keep.mapv(|k| if k { scale } else { 0.0 });
        let value = self.value(a) * &mask;
        let ng = self.ng(a);
        self.push(value, Op::Dropout(a, mask), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.value(loss).dim();
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.param_vars.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(val(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * val(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if self.ng(*r) {
                    acc(*r, row_broadcast_grad(g));
                }
            }
            Op::MulRow(a, r) => {
                if self.ng(*a) {
                    acc(*a, g * val(*r));
                }
                if self.ng(*r) {
                    acc(*r, row_broadcast_grad(&(g * val(*a))));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Log(a) => acc(*a, g / val(*a)),
            Op::Sin(a) => acc(*a, g * &val(*a).mapv(f64::cos)),
            Op::Cos(a) => acc(*a, g * &val(*a).mapv(|x| -x.sin())),
            Op::Sqrt(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                    *d = if y > 0.0 { *d * 0.5 / y } else { 0.0 };
                });
                acc(*a, d)
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| *d = if x > 0.0 { *d } else { 0.0 });
                acc(*a, d)
            }
            Op::Silu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    *d *= s * (1.0 + x * (1.0 - s));
                });
                acc(*a, d)
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *d *= 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                });
                acc(*a, d)
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * s);
                }
                acc(*a, d)
            }
            Op::LayerNormRows(a, inv_std) => {
                let y = &node.value;
                let m = y.ncols() as f64;
                let mut d = g.clone();
                for ((mut drow, yrow), &is) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                    let mean_g = drow.sum() / m;
                    let mean_gy = drow.dot(&yrow) / m;
                    if self.corrupt_backward {
                        Zip::from(&mut drow).for_each(|dv| *dv = is * (*dv - mean_g));
                    } else {
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|dv, &yv| *dv = is * (*dv - mean_g - yv * mean_gy));
                    }
                }
                acc(*a, d)
            }
            Op::Sum(a) => {
                let shape = val(*a).raw_dim();
                acc(*a, Array2::from_elem(shape, g[[0, 0]]))
            }
            Op::Mean(a) => {
                let v = val(*a);
                acc(*a, Array2::from_elem(v.raw_dim(), g[[0, 0]] / v.len() as f64))
            }
            Op::SumRows(a) => {
                let n = val(*a).nrows();
                let d = g.broadcast((n, g.ncols())).unwrap().to_owned();
                acc(*a, d)
            }
            Op::RowNorms(a) => {
                let x = val(*a);
                let mut d = x.clone();
                for ((mut row, &norm), &gi) in d
                    .rows_mut()
                    .into_iter()
                    .zip(node.value.iter())
                    .zip(g.iter())
                {
                    if norm > 0.0 {
                        row *= gi / norm;
                    } else {
                        row.fill(0.0);
                    }
                }
                acc(*a, d)
            }
            Op::Columns(a, start) => {
                if self.ng(*a) {
                    let mut d = Array2::zeros(val(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    acc(*a, d)
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if self.ng(*p) {
                        acc(*p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::PairwiseDist(a, b) => {
                // W = G / D, zero where D = 0.
                let mut w = g.clone();
                Zip::from(&mut w).and(&node.value).for_each(|wv, &dv| {
                    *wv = if dv > 0.0 { *wv / dv } else { 0.0 };
                });
                self.pairwise_backward(*a, *b, &w, 1.0, &mut acc);
            }
            Op::PairwiseSqDist(a, b) => {
                self.pairwise_backward(*a, *b, g, 2.0, &mut acc);
            }
            Op::Dropout(a, mask) => acc(*a, g * mask),
        }
    }

    /// Shared adjoint of `|a_i - b_j|`-type maps given per-pair weights `w`:
    /// `da = c (a * rowsum(w) - w b)`, `db = c (b * colsum(w) - w^T a)`.
    fn pairwise_backward(
        &self,
        a: Var,
        b: Var,
        w: &Array2<f64>,
        c: f64,
        acc: &mut impl FnMut(Var, Array2<f64>),
    ) {
        let (av, bv) = (self.value(a), self.value(b));
        if self.ng(a) {
            let rs = w.sum_axis(Axis(1)).insert_axis(Axis(1));
            let da = (av * &rs - w.dot(bv)) * c;
            acc(a, da);
        }
        if self.ng(b) {
            let cs = w.sum_axis(Axis(0)).insert_axis(Axis(1));
            let db = (bv * &cs - w.t().dot(av)) * c;
            acc(b, db);
        }
    }
}
