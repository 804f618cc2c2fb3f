//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive applied through a [`Tape`] computes its value eagerly and
//! appends a node that remembers its parents. [`Tape::backward`] walks the
//! nodes in reverse order, so the recording order is already a topological
//! order. Gradients accumulate additively over fan-out.

use std::sync::atomic::{AtomicU32, Ordering};

use super::ops::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    Relu(usize),
    Gelu(usize),
    ClampMin(usize, f64),
    SumAll(usize),
    SumAxis(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    GatherRows(usize, Vec<usize>),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    CrossSqDist(usize, usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Const => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulCol(a, b) | CrossSqDist(a, b) => {
                vec![*a, *b]
            }
            Scale(x, _) | AddScalar(x) | Exp(x) | Ln(x) | Square(x) | Sqrt(x) | Recip(x)
            | Relu(x) | Gelu(x) | ClampMin(x, _) | SumAll(x) | SumAxis(x, _) | Reshape(x)
            | Permute(x, _) | GatherRows(x, _) | Softmax(x) => vec![*x],
            Slice { x, .. } => vec![*x],
            Concat { xs, .. } => xs.clone(),
            LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
        }
    }
}

/// Records primitive operations for a single backward pass.
///
/// A tape has a single writer. Independent tapes may live on different threads.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], addressable by the leaf handles.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the leaf was not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "variable belongs to another tape");
        self.grads[v.index].as_ref()
    }

    /// Removes and returns the gradient of a leaf, zeros when unreachable.
    pub fn take(&mut self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable belongs to another tape");
        self.grads[v.index].take().unwrap_or_else(|| {
            Tensor::zeros(self.shapes[v.index].clone()).expect("recorded shape is valid")
        })
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        v.index
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires = match op {
            Op::Leaf => true,
            Op::Const => false,
            ref other => other.parents().iter().any(|&p| self.requires_grad[p]),
        };
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires);
        Var {
            tape: self.id,
            index: self.values.len() - 1,
        }
    }

    /// A differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[self.idx(v)]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = ops::matmul(&self.values[ia], &self.values[ib], ta, tb)?;
        Ok(self.push(v, Op::MatMul { a: ia, b: ib, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = ops::add(&self.values[ia], &self.values[ib])?;
        Ok(self.push(v, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = ops::sub(&self.values[ia], &self.values[ib])?;
        Ok(self.push(v, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = ops::mul(&self.values[ia], &self.values[ib])?;
        Ok(self.push(v, Op::Mul(ia, ib)))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = (self.idx(x), self.idx(row));
        let v = ops::add_row(&self.values[ix], &self.values[ir])?;
        Ok(self.push(v, Op::AddRow(ix, ir)))
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (ix, ic) = (self.idx(x), self.idx(col));
        let v = ops::mul_col(&self.values[ix], &self.values[ic])?;
        Ok(self.push(v, Op::MulCol(ix, ic)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ix = self.idx(x);
        let v = ops::scale(&self.values[ix], c);
        self.push(v, Op::Scale(ix, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let ix = self.idx(x);
        let v = ops::add_scalar(&self.values[ix], c);
        self.push(v, Op::AddScalar(ix))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let v = ops::exp(&self.values[ix]);
        self.push(v, Op::Exp(ix))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        let v = ops::ln(&self.values[ix])?;
        Ok(self.push(v, Op::Ln(ix)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let v = ops::square(&self.values[ix]);
        self.push(v, Op::Square(ix))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        let v = ops::sqrt(&self.values[ix])?;
        Ok(self.push(v, Op::Sqrt(ix)))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        let v = ops::recip(&self.values[ix])?;
        Ok(self.push(v, Op::Recip(ix)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let v = ops::relu(&self.values[ix]);
        self.push(v, Op::Relu(ix))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let v = ops::gelu(&self.values[ix]);
        self.push(v, Op::Gelu(ix))
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let ix = self.idx(x);
        let v = ops::clamp_min(&self.values[ix], floor);
        self.push(v, Op::ClampMin(ix, floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let v = ops::sum_all(&self.values[ix]);
        self.push(v, Op::SumAll(ix))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x);
        let v = ops::sum_axis(&self.values[ix], axis)?;
        Ok(self.push(v, Op::SumAxis(ix, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).shape().get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let v = ops::reshape(&self.values[ix], shape)?;
        Ok(self.push(v, Op::Reshape(ix)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let v = ops::permute(&self.values[ix], axes)?;
        Ok(self.push(v, Op::Permute(ix, axes.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        let v = ops::transpose(&self.values[ix])?;
        Ok(self.push(v, Op::Permute(ix, vec![1, 0])))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x);
        let v = ops::slice(&self.values[ix], axis, start, len)?;
        Ok(self.push(v, Op::Slice { x: ix, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids: Vec<usize> = xs.iter().map(|&x| self.idx(x)).collect();
        let inputs: Vec<&Tensor> = ids.iter().map(|&i| &self.values[i]).collect();
        let v = ops::concat(&inputs, axis)?;
        Ok(self.push(v, Op::Concat { xs: ids, axis }))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let v = ops::gather_rows(&self.values[ix], indices)?;
        Ok(self.push(v, Op::GatherRows(ix, indices.to_vec())))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let v = ops::softmax(&self.values[ix]);
        self.push(v, Op::Softmax(ix))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let v = ops::layer_norm(&self.values[ix], &self.values[ig], &self.values[ib])?;
        Ok(self.push(v, Op::LayerNorm { x: ix, gamma: ig, beta: ib }))
    }

    pub fn cross_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = ops::cross_sqdist(&self.values[ia], &self.values[ib])?;
        Ok(self.push(v, Op::CrossSqDist(ia, ib)))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss);
        if self.values[root].len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[root].shape()),
            ));
        }
        let n = self.values.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            if !self.requires_grad[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.ops[i], g) {
                (Op::Leaf, Some(g)) => {
                    Some(Tensor::new(self.values[i].shape().to_vec(), g).expect("leaf shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = &self.requires_grad;
        let val = |j: usize| self.values[j].data();
        let y = self.values[i].data();

        // Elementwise unary rule: dx += dy * f(x, y).
        let mut unary = |x: usize, f: &dyn Fn(f64, f64) -> f64| {
            if !rg[x] {
                return;
            }
            let xs = self.values[x].data();
            let g = grad_buf(grads, x, xs.len());
            for k in 0..xs.len() {
                g[k] += dy[k] * f(xs[k], y[k]);
            }
        };

        match &self.ops[i] {
            Op::Leaf | Op::Const => {}
            Op::Scale(x, c) => {
                let c = *c;
                unary(*x, &|_, _| c)
            }
            Op::AddScalar(x) | Op::Reshape(x) => unary(*x, &|_, _| 1.0),
            Op::Exp(x) => unary(*x, &|_, y| y),
            Op::Ln(x) => unary(*x, &|x, _| 1.0 / x),
            Op::Square(x) => unary(*x, &|x, _| 2.0 * x),
            Op::Sqrt(x) => unary(*x, &|_, y| 0.5 / y),
            Op::Recip(x) => unary(*x, &|_, y| -y * y),
            Op::Relu(x) => unary(*x, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Gelu(x) => unary(*x, &|x, _| ops::gelu_grad_scalar(x)),
            Op::ClampMin(x, floor) => {
                let f = *floor;
                unary(*x, &|x, _| if x >= f { 1.0 } else { 0.0 })
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.ops[i], Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg[*a] {
                    let g = grad_buf(grads, *a, dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if rg[*b] {
                    let g = grad_buf(grads, *b, dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if rg[*a] {
                    let g = grad_buf(grads, *a, dy.len());
                    for k in 0..dy.len() {
                        g[k] += dy[k] * bv[k];
                    }
                }
                if rg[*b] {
                    let g = grad_buf(grads, *b, dy.len());
                    for k in 0..dy.len() {
                        g[k] += dy[k] * av[k];
                    }
                }
            }
            Op::AddRow(x, row) => {
                if rg[*x] {
                    let g = grad_buf(grads, *x, dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if rg[*row] {
                    let c = val(*row).len();
                    let g = grad_buf(grads, *row, c);
                    for r in dy.chunks(c) {
                        g.iter_mut().zip(r).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (val(*x), val(*col));
                let c = xv.len() / cv.len();
                if rg[*x] {
                    let g = grad_buf(grads, *x, xv.len());
                    for r in 0..cv.len() {
                        for j in 0..c {
                            g[r * c + j] += dy[r * c + j] * cv[r];
                        }
                    }
                }
                if rg[*col] {
                    let g = grad_buf(grads, *col, cv.len());
                    for r in 0..cv.len() {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += dy[r * c + j] * xv[r * c + j];
                        }
                        g[r] += s;
                    }
                }
            }
            Op::SumAll(x) => {
                if rg[*x] {
                    let g = grad_buf(grads, *x, self.values[*x].len());
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::SumAxis(x, axis) => {
                if rg[*x] {
                    let shape = self.values[*x].shape();
                    let (outer, len, inner) = ops::axis_split(shape, *axis);
                    let g = grad_buf(grads, *x, outer * len * inner);
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for k in 0..inner {
                                g[base + k] += dy[o * inner + k];
                            }
                        }
                    }
                }
            }
            Op::Permute(x, axes) => {
                if rg[*x] {
                    let offsets = ops::permute_offsets(self.values[*x].shape(), axes);
                    let g = grad_buf(grads, *x, dy.len());
                    for (k, o) in offsets.into_iter().enumerate() {
                        g[o] += dy[k];
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                if rg[*x] {
                    let shape = self.values[*x].shape();
                    let (outer, full, inner) = ops::axis_split(shape, *axis);
                    let len = self.values[i].shape()[*axis];
                    let g = grad_buf(grads, *x, outer * full * inner);
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            g[dst + k] += dy[src + k];
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = ops::axis_split(self.values[i].shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.values[x].shape()[*axis];
                    if rg[x] {
                        let g = grad_buf(grads, x, outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                g[dst + k] += dy[src + k];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows(x, idx) => {
                if rg[*x] {
                    let c = self.values[*x].cols();
                    let g = grad_buf(grads, *x, self.values[*x].len());
                    for (r, &src) in idx.iter().enumerate() {
                        for k in 0..c {
                            g[src * c + k] += dy[r * c + k];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if rg[*x] {
                    let l = *self.values[i].shape().last().expect("rank >= 1");
                    let g = grad_buf(grads, *x, dy.len());
                    for ((gr, yr), dr) in g.chunks_mut(l).zip(y.chunks(l)).zip(dy.chunks(l)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for k in 0..l {
                            gr[k] += yr[k] * (dr[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = val(*x);
                let gv = val(*gamma);
                let l = gv.len();
                let rows = xv.len() / l;
                let mut dgamma = vec![0.0; l];
                let mut dbeta = vec![0.0; l];
                let mut dx = vec![0.0; xv.len()];
                let mut xhat = vec![0.0; l];
                let mut dxhat = vec![0.0; l];
                for r in 0..rows {
                    let xr = &xv[r * l..(r + 1) * l];
                    let dr = &dy[r * l..(r + 1) * l];
                    let (mean, inv) = ops::layer_norm_stats(xr);
                    for k in 0..l {
                        xhat[k] = (xr[k] - mean) * inv;
                        dxhat[k] = dr[k] * gv[k];
                        dgamma[k] += dr[k] * xhat[k];
                        dbeta[k] += dr[k];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / l as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / l as f64;
                    for k in 0..l {
                        dx[r * l + k] = inv * (dxhat[k] - m1 - xhat[k] * m2);
                    }
                }
                for (j, d) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if rg[j] {
                        let g = grad_buf(grads, j, d.len());
                        g.iter_mut().zip(&d).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::CrossSqDist(a, b) => {
                let (at, bt) = (&self.values[*a], &self.values[*b]);
                let (n, m, d) = (at.rows(), bt.rows(), at.cols());
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for p in 0..n {
                    for q in 0..m {
                        let w = 2.0 * dy[p * m + q];
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = at.data()[p * d + k] - bt.data()[q * d + k];
                            da[p * d + k] += w * diff;
                            db[q * d + k] -= w * diff;
                        }
                    }
                }
                for (j, dv) in [(*a, da), (*b, db)] {
                    if rg[j] {
                        let g = grad_buf(grads, j, dv.len());
                        g.iter_mut().zip(&dv).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (at, bt) = (&self.values[*a], &self.values[*b]);
                let (ar, ac) = (at.shape()[at.rank() - 2], at.shape()[at.rank() - 1]);
                let (br, bc) = (bt.shape()[bt.rank() - 2], bt.shape()[bt.rank() - 1]);
                let groups = if at.rank() == 3 { at.shape()[0] } else { 1 };
                let m = if *ta { ac } else { ar };
                let n = if *tb { br } else { bc };
                let (sa, sb, sc) = (ar * ac, br * bc, m * n);
                if rg[*a] {
                    let g = grad_buf(grads, *a, groups * sa);
                    for gi in 0..groups {
                        let dc = &dy[gi * sc..(gi + 1) * sc];
                        let bb = &bt.data()[gi * sb..(gi + 1) * sb];
                        let out = &mut g[gi * sa..(gi + 1) * sa];
                        if *ta {
                            gemm(bb, br, bc, *tb, dc, m, n, true, out, 1.0);
                        } else {
                            gemm(dc, m, n, false, bb, br, bc, !*tb, out, 1.0);
                        }
                    }
                }
                if rg[*b] {
                    let g = grad_buf(grads, *b, groups * sb);
                    for gi in 0..groups {
                        let dc = &dy[gi * sc..(gi + 1) * sc];
                        let aa = &at.data()[gi * sa..(gi + 1) * sa];
                        let out = &mut g[gi * sb..(gi + 1) * sb];
                        if *tb {
                            gemm(dc, m, n, true, aa, ar, ac, *ta, out, 1.0);
                        } else {
                            gemm(aa, ar, ac, !*ta, dc, m, n, false, out, 1.0);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.3, -1.0, 7.0]).unwrap());
        let a = tape.sum(x);
        let b = tape.sum(x);
        let s = tape.add(a, b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2]).unwrap());
        let y = tape.leaf(Tensor::ones(vec![3]).unwrap());
        let s = tape.sum(x);
        let mut g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.take(y).data(), &[0.0; 3]);
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(vec![2]).unwrap());
        let x = tape.leaf(Tensor::ones(vec![2]).unwrap());
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }
}
