//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar output walks the tape in reverse and
//! returns the gradient of every recorded node. The tape is dropped after
//! use; there is no global graph.
//!
//! [`grad`] and [`finite_diff_check`] wrap this for functions of a
//! [`ParamSet`].

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::NumericError;
use crate::tensor::{
    self, conv1d, conv2d, matmul, matmul_nt, matmul_tn, softmax_rows, Conv1dGeometry,
    Conv2dGeometry, ParamSet, Tensor,
};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-row linear maps acting on fixed column blocks of a `[N, D]` matrix.
///
/// For row `i` and block `b = (offset, size)`, the output slice
/// `y[i, offset..offset+size]` is `M[i][b] · x[i, offset..offset+size]`.
/// Columns outside every block pass through unchanged.
#[derive(Clone, Debug)]
pub struct BlockLinearMaps {
    dim: usize,
    blocks: Vec<(usize, usize)>,
    /// Row-major matrices, laid out `[row][block][size*size]`.
    mats: Vec<f64>,
    stride: usize,
}

impl BlockLinearMaps {
    /// Creates identity maps for `rows` rows.
    pub fn identity(rows: usize, dim: usize, blocks: Vec<(usize, usize)>) -> Result<Self, NumericError> {
        let mut covered = vec![false; dim];
        for &(off, size) in &blocks {
            if size == 0 || off + size > dim {
                return Err(NumericError::Dimension(format!("block ({off},{size}) outside width {dim}")));
            }
            for c in &mut covered[off..off + size] {
                if *c {
                    return Err(NumericError::Dimension("overlapping blocks".into()));
                }
                *c = true;
            }
        }
        let stride: usize = blocks.iter().map(|(_, s)| s * s).sum();
        let mut mats = vec![0.0; rows * stride];
        for r in 0..rows {
            let mut base = r * stride;
            for &(_, size) in &blocks {
                for d in 0..size {
                    mats[base + d * size + d] = 1.0;
                }
                base += size * size;
            }
        }
        Ok(Self { dim, blocks, mats, stride })
    }

    pub fn rows(&self) -> usize {
        if self.stride == 0 {
            0
        } else {
            self.mats.len() / self.stride
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    /// Mutable view of the matrix for `(row, block)`, row-major `size × size`.
    pub fn block_mut(&mut self, row: usize, block: usize) -> &mut [f64] {
        let mut base = row * self.stride;
        for &(_, size) in &self.blocks[..block] {
            base += size * size;
        }
        let size = self.blocks[block].1;
        &mut self.mats[base..base + size * size]
    }

    pub fn block(&self, row: usize, block: usize) -> &[f64] {
        let mut base = row * self.stride;
        for &(_, size) in &self.blocks[..block] {
            base += size * size;
        }
        let size = self.blocks[block].1;
        &self.mats[base..base + size * size]
    }

    fn check(&self, x: &Tensor) -> Result<(), NumericError> {
        if x.shape().len() != 2 || x.cols() != self.dim || (x.rows() != self.rows() && self.stride > 0) {
            return Err(NumericError::Dimension(format!(
                "block maps for {}x{} applied to {:?}",
                self.rows(),
                self.dim,
                x.shape()
            )));
        }
        Ok(())
    }

    fn apply_impl(&self, x: &Tensor, transpose: bool) -> Tensor {
        let mut out = x.clone();
        let d = self.dim;
        let data = out.data_mut();
        for r in 0..x.rows() {
            let xrow = x.row(r);
            let mut base = r * self.stride;
            for &(off, size) in &self.blocks {
                let m = &self.mats[base..base + size * size];
                for a in 0..size {
                    let mut acc = 0.0;
                    for b in 0..size {
                        let coef = if transpose { m[b * size + a] } else { m[a * size + b] };
                        acc += coef * xrow[off + b];
                    }
                    data[r * d + off + a] = acc;
                }
                base += size * size;
            }
        }
        out
    }

    /// Applies the maps to a `[N, D]` tensor outside of any tape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, NumericError> {
        self.check(x)?;
        Ok(self.apply_impl(x, false))
    }

    /// Applies the transposed maps.
    pub fn apply_transposed(&self, x: &Tensor) -> Result<Tensor, NumericError> {
        self.check(x)?;
        Ok(self.apply_impl(x, true))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Softmax(Var),
    LayerNorm(Var, Rc<Vec<f64>>),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    Conv1d { x: Var, w: Var, stride: usize },
    Conv2d { x: Var, w: Var, stride: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Rc<Vec<usize>> },
    BlockLinear { x: Var, maps: Rc<BlockLinearMaps> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn row_broadcast(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericError> {
        let (x, r) = (self.value(a), self.value(row));
        if r.numel() != x.cols() {
            return Err(NumericError::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                r.shape(),
                x.shape()
            )));
        }
        let c = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, r.data()[i % c]);
        }
        Ok(out)
    }

    /// `[N, D] + [D]`, broadcasting the row over all N rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericError> {
        let value = self.row_broadcast(a, row, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `[N, D] ⊙ [D]`, broadcasting the row over all N rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericError> {
        let value = self.row_broadcast(a, row, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericError> {
        let value = softmax_rows(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, NumericError> {
        let (value, inv) = tensor::layer_norm_with_stats(self.value(a), eps)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LayerNorm(a, Rc::new(inv)), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, NumericError> {
        let value = conv1d(self.value(x), self.value(w), stride)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv1d { x, w, stride }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, NumericError> {
        let value = conv2d(self.value(x), self.value(w), stride)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv2d { x, w, stride }, rg))
    }

    /// Columns `start..start+len` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let src = self.value(x);
        if src.shape().len() != 2 || start + len > src.cols() {
            return Err(NumericError::Dimension(format!(
                "slice {start}..{} of {:?}",
                start + len,
                src.shape()
            )));
        }
        let mut data = Vec::with_capacity(src.rows() * len);
        for r in 0..src.rows() {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![src.rows(), len], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(NumericError::Dimension(format!("concat_cols of {:?}", v.shape())));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let cols = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(NumericError::Dimension(format!("concat_rows of {:?}", v.shape())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Output row `i` is input row `index[i]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Rc<Vec<usize>>) -> Result<Var, NumericError> {
        let src = self.value(x);
        let c = src.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= src.rows() {
                return Err(NumericError::Dimension(format!("row {i} out of {}", src.rows())));
            }
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![index.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows { x, index }, rg))
    }

    pub fn block_linear(&mut self, x: Var, maps: Rc<BlockLinearMaps>) -> Result<Var, NumericError> {
        let value = maps.apply(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::BlockLinear { x, maps }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.numel().max(1) as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// `x · W + b` for `x: [N, I]`, `W: [I, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericError> {
        if self.value(output).numel() != 1 {
            return Err(NumericError::Unsupported(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::new(self.shape(output).to_vec(), vec![1.0])?);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumericError> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, matmul(g, self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let r = self.value(*row);
                    let mut acc = vec![0.0; r.numel()];
                    for (i, v) in g.data().iter().enumerate() {
                        acc[i % r.numel()] += v;
                    }
                    self.accumulate(grads, *row, Tensor::new(r.shape().to_vec(), acc)?);
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                let c = r.numel();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= r.data()[i % c];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*row) {
                    let x = self.value(*a);
                    let mut acc = vec![0.0; c];
                    for (i, (gv, xv)) in g.data().iter().zip(x.data()).enumerate() {
                        acc[i % c] += gv * xv;
                    }
                    self.accumulate(grads, *row, Tensor::new(r.shape().to_vec(), acc)?);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = g.clone();
                for ((grow, yrow), inv) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(inv_std.iter()) {
                    let mean_g = grow.iter().sum::<f64>() / c as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = inv * (*gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Silu(a) => {
                let gx = g.zip_map(self.value(*a), |gv, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    gv * s * (1.0 + x * (1.0 - s))
                })?;
                self.accumulate(grads, *a, gx);
            }
            Op::Tanh(a) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *a, gx);
            }
            Op::Square(a) => {
                let gx = g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x)?;
                self.accumulate(grads, *a, gx);
            }
            Op::Conv1d { x, w, stride } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo = Conv1dGeometry::infer(xv, wv, *stride)?;
                let mut gx = vec![0.0; xv.numel()];
                let mut gw = vec![0.0; wv.numel()];
                let gd = g.data();
                for t in 0..geo.out_len {
                    for k in 0..geo.k {
                        let xi = (t * stride + k) * geo.c_in;
                        for ci in 0..geo.c_in {
                            let wbase = (k * geo.c_in + ci) * geo.c_out;
                            let mut accx = 0.0;
                            for co in 0..geo.c_out {
                                let go = gd[t * geo.c_out + co];
                                accx += go * wv.data()[wbase + co];
                                gw[wbase + co] += go * xv.data()[xi + ci];
                            }
                            gx[xi + ci] += accx;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
            }
            Op::Conv2d { x, w, stride } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo = Conv2dGeometry::infer(xv, wv, *stride)?;
                let mut gx = vec![0.0; xv.numel()];
                let mut gw = vec![0.0; wv.numel()];
                let gd = g.data();
                for oy in 0..geo.oh {
                    for ox in 0..geo.ow {
                        let grow = &gd[(oy * geo.ow + ox) * geo.c_out..][..geo.c_out];
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                                let xbase = (iy * geo.w + ix) * geo.c_in;
                                for ci in 0..geo.c_in {
                                    let wbase = ((ky * geo.kw + kx) * geo.c_in + ci) * geo.c_out;
                                    let xval = xv.data()[xbase + ci];
                                    let mut accx = 0.0;
                                    for (co, &go) in grow.iter().enumerate() {
                                        accx += go * wv.data()[wbase + co];
                                        gw[wbase + co] += go * xval;
                                    }
                                    gx[xbase + ci] += accx;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let len = g.cols();
                let mut gx = Tensor::zeros(src.shape());
                let c = src.cols();
                let data = gx.data_mut();
                for r in 0..g.rows() {
                    data[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(g.rows() * pc);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![g.rows(), pc], data)?);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.rg(p) {
                        let data = g.data()[offset * c..(offset + pr) * c].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![pr, c], data)?);
                    }
                    offset += pr;
                }
            }
            Op::GatherRows { x, index } => {
                let src = self.value(*x);
                let c = src.cols();
                let mut gx = Tensor::zeros(src.shape());
                let data = gx.data_mut();
                for (out_row, &i) in index.iter().enumerate() {
                    for (d, v) in data[i * c..(i + 1) * c].iter_mut().zip(g.row(out_row)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BlockLinear { x, maps } => {
                self.accumulate(grads, *x, maps.apply_transposed(g)?);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.shape(*x))?);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0] / n));
            }
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Registers every parameter as a differentiable leaf.
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let vars = params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
        Self { vars }
    }

    /// Registers every parameter as a constant (forward-only evaluation).
    pub fn bind_constant(tape: &mut Tape, params: &ParamSet) -> Self {
        let vars = params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var, NumericError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumericError::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

/// Value and exact reverse-mode gradient of `f` at `params`.
pub fn grad<F, E>(f: F, params: &ParamSet) -> Result<(f64, ParamSet), E>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var, E>,
    E: From<NumericError>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params);
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).data().first().copied().unwrap_or(f64::NAN);
    let grads = tape.backward(out)?;
    let gset = vars.vars.iter().map(|(k, &v)| (k.clone(), grads.get(v))).collect();
    Ok((value, gset))
}

/// Evaluates `f` at `params` without recording gradients.
pub fn eval<F, E>(f: F, params: &ParamSet) -> Result<f64, E>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var, E>,
    E: From<NumericError>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::bind_constant(&mut tape, params);
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(NumericError::Unsupported(format!("non-scalar objective {:?}", value.shape())).into());
    }
    Ok(value.data()[0])
}

/// Relative error floor: absolute disagreements below this are treated as exact.
pub const FD_REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Checks every entry of every parameter against central differences.
pub fn finite_diff_check<F, E>(f: F, params: &ParamSet, h: f64, tol: f64) -> Result<FdReport, E>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var, E>,
    E: From<NumericError>,
{
    finite_diff_check_sampled(f, params, h, tol, None, 0)
}

/// Like [`finite_diff_check`], but checks at most `max_entries` randomly
/// chosen entries per parameter tensor (all entries when `None`).
pub fn finite_diff_check_sampled<F, E>(
    f: F,
    params: &ParamSet,
    h: f64,
    tol: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<FdReport, E>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var, E>,
    E: From<NumericError>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(NumericError::Domain(format!("finite-difference step must be positive, got {h}")).into());
    }
    let (_, analytic) = grad(&f, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut checks = Vec::new();
    for (name, value) in params.iter() {
        let n = value.numel();
        let entries: Vec<usize> = match max_entries {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let g = analytic.get(name).expect("gradient for every parameter");
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &entries {
            let orig = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = eval(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = eval(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = g.data()[i];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        checks.push(ParamCheck {
            name: name.clone(),
            entries_checked: entries.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(FdReport { h, tol, params: checks, max_rel_error, passed: max_rel_error < tol })
}

/// Checks each parameter tensor along `directions` random unit directions.
///
/// Every entry of the tensor is moved at once, so a wrong gradient in any
/// entry shows up as a mismatch between `g·d` and the central difference
/// along `d`. `entries_checked` counts the entries covered, which is all of
/// them.
pub fn finite_diff_check_directional<F, E>(
    f: F,
    params: &ParamSet,
    h: f64,
    tol: f64,
    directions: usize,
    seed: u64,
) -> Result<FdReport, E>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var, E>,
    E: From<NumericError>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(NumericError::Domain(format!("finite-difference step must be positive, got {h}")).into());
    }
    let (_, analytic) = grad(&f, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut checks = Vec::new();
    for (name, value) in params.iter() {
        let g = analytic.get(name).expect("gradient for every parameter");
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for _ in 0..directions {
            let mut d: Vec<f64> = (0..value.numel()).map(|_| rng.sample(StandardNormal)).collect();
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            d.iter_mut().for_each(|x| *x /= norm);
            let shifted = |sign: f64| -> Vec<f64> {
                value.data().iter().zip(&d).map(|(v, dv)| v + sign * h * dv).collect()
            };
            probe.get_mut(name).unwrap().data_mut().copy_from_slice(&shifted(1.0));
            let plus = eval(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut().copy_from_slice(&shifted(-1.0));
            let minus = eval(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut().copy_from_slice(value.data());
            let numeric = (plus - minus) / (2.0 * h);
            let a: f64 = g.data().iter().zip(&d).map(|(x, y)| x * y).sum();
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        checks.push(ParamCheck {
            name: name.clone(),
            entries_checked: value.numel(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(FdReport { h, tol, params: checks, max_rel_error, passed: max_rel_error < tol })
}
