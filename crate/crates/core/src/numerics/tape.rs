//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles in
//! execution order; [`Tape::backward`] walks the record once in reverse.
//! Tapes are cheap and meant to be rebuilt for every forward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{row_moments, softmax_row, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    RowScale(usize, usize),
    Tanh(usize),
    Gelu(usize),
    Transpose(usize),
    GatherRows(usize, Vec<usize>),
    GatherCols(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SumRows(usize),
    SumAll(usize),
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        shift: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Rope {
        x: usize,
        positions: Vec<usize>,
        base: f64,
        n_heads: usize,
    },
    NormalizeOrUniform {
        x: usize,
        total: f64,
        fallback: bool,
    },
    CrossEntropy {
        logits: usize,
        probs: Tensor,
        targets: Vec<usize>,
    },
    MergeRows {
        a: usize,
        b: usize,
        take_a: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.index]),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Rotate consecutive dimension pairs inside every head. `sign = -1` applies
/// the inverse rotation.
pub(crate) fn rope_rotate(
    data: &mut [f64],
    cols: usize,
    positions: &[usize],
    base: f64,
    n_heads: usize,
    sign: f64,
) {
    let d_head = cols / n_heads;
    let inv_freq: Vec<f64> = (0..d_head / 2)
        .map(|i| base.powf(-2.0 * i as f64 / d_head as f64))
        .collect();
    for (row, &pos) in data.chunks_mut(cols).zip(positions) {
        if pos == 0 {
            continue;
        }
        for head in row.chunks_mut(d_head) {
            for (i, pair) in head.chunks_mut(2).enumerate() {
                let theta = sign * pos as f64 * inv_freq[i];
                let (s, c) = theta.sin_cos();
                let (x0, x1) = (pair[0], pair[1]);
                pair[0] = x0 * c - x1 * s;
                pair[1] = x0 * s + x1 * c;
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        v.index
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Tracked leaf (a parameter): gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::Add(ia, ib), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::Sub(ia, ib), ng))
    }

    /// Elementwise product of equally shaped operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::Mul(ia, ib), ng))
    }

    /// `x[n×d] + b[1×d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x), self.idx(b));
        let (xv, bv) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if !xv.is_matrix() || bv.numel() != xv.cols() {
            return Err(Error::dim("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let d = xv.cols();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(ix) || self.ng(ib);
        Ok(self.push(out, Op::AddRow(ix, ib), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ix = self.idx(x);
        let out = self.nodes[ix].value.scale(c);
        let ng = self.ng(ix);
        self.push(out, Op::Scale(ix, c), ng)
    }

    /// `x * s` where `s` is a tracked `1×1` scalar.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x), self.idx(s));
        let sv = &self.nodes[is].value;
        if sv.numel() != 1 {
            return Err(Error::dim("mul_scalar", self.nodes[ix].value.shape(), sv.shape()));
        }
        let c = sv.data()[0];
        let out = self.nodes[ix].value.scale(c);
        let ng = self.ng(ix) || self.ng(is);
        Ok(self.push(out, Op::MulScalar(ix, is), ng))
    }

    /// Scale row `t` of `x[n×d]` by `w[t]`, with `w` holding `n` entries.
    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, iw) = (self.idx(x), self.idx(w));
        let (xv, wv) = (&self.nodes[ix].value, &self.nodes[iw].value);
        if !xv.is_matrix() || wv.numel() != xv.rows() {
            return Err(Error::dim("row_scale", xv.shape(), wv.shape()));
        }
        let mut out = xv.clone();
        let d = xv.cols();
        for (row, &s) in out.data_mut().chunks_mut(d).zip(wv.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(ix) || self.ng(iw);
        Ok(self.push(out, Op::RowScale(ix, iw), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let out = self.nodes[ix].value.map(f64::tanh);
        let ng = self.ng(ix);
        self.push(out, Op::Tanh(ix), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let out = self.nodes[ix].value.map(gelu);
        let ng = self.ng(ix);
        self.push(out, Op::Gelu(ix), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        let out = self.nodes[ix].value.transpose()?;
        let ng = self.ng(ix);
        Ok(self.push(out, Op::Transpose(ix), ng))
    }

    /// Select (possibly repeated) rows; also serves as an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let xv = &self.nodes[ix].value;
        if !xv.is_matrix() || rows.is_empty() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(Error::dim("gather_rows", xv.shape(), rows));
        }
        let mut data = Vec::with_capacity(rows.len() * xv.cols());
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), xv.cols()], data)?;
        let ng = self.ng(ix);
        Ok(self.push(out, Op::GatherRows(ix, rows.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let rows: Vec<usize> = range.collect();
        self.gather_rows(x, &rows)
    }

    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let xv = &self.nodes[ix].value;
        if !xv.is_matrix() || cols.is_empty() || cols.iter().any(|&c| c >= xv.cols()) {
            return Err(Error::dim("gather_cols", xv.shape(), cols));
        }
        let mut data = Vec::with_capacity(xv.rows() * cols.len());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let out = Tensor::new(vec![xv.rows(), cols.len()], data)?;
        let ng = self.ng(ix);
        Ok(self.push(out, Op::GatherCols(ix, cols.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let cols: Vec<usize> = range.collect();
        self.gather_cols(x, &cols)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let first = idx
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let cols = self.nodes[*first].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if !v.is_matrix() || v.cols() != cols {
                return Err(Error::dim("concat_rows", self.nodes[*first].value.shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = idx.iter().any(|&i| self.ng(i));
        Ok(self.push(out, Op::ConcatRows(idx), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let first = *idx
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let rows = self.nodes[first].value.rows();
        let mut total_cols = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if !v.is_matrix() || v.rows() != rows {
                return Err(Error::dim("concat_cols", self.nodes[first].value.shape(), v.shape()));
            }
            total_cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let out = Tensor::new(vec![rows, total_cols], data)?;
        let ng = idx.iter().any(|&i| self.ng(i));
        Ok(self.push(out, Op::ConcatCols(idx), ng))
    }

    /// Column sums of a matrix, as a `1×d` row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        let xv = &self.nodes[ix].value;
        if !xv.is_matrix() {
            return Err(Error::dim("sum_rows", xv.shape(), &[]));
        }
        let d = xv.cols();
        let mut out = vec![0.0; d];
        for row in xv.data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let out = Tensor::new(vec![1, d], out)?;
        let ng = self.ng(ix);
        Ok(self.push(out, Op::SumRows(ix), ng))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).rows();
        let s = self.sum_rows(x)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let out = Tensor::scalar(self.nodes[ix].value.sum());
        let ng = self.ng(ix);
        self.push(out, Op::SumAll(ix), ng)
    }

    /// Row-wise softmax with hidden keys. With `causal`, row `i` additionally
    /// hides keys `j > i`.
    pub fn masked_softmax(&mut self, x: Var, visible: &[bool], causal: bool) -> Result<Var> {
        let ix = self.idx(x);
        let xv = &self.nodes[ix].value;
        let l = xv.cols();
        if !xv.is_matrix() || visible.len() != l {
            return Err(Error::dim("masked_softmax", xv.shape(), &[visible.len()]));
        }
        let mut out = xv.clone();
        for (i, row) in out.data_mut().chunks_mut(l).enumerate() {
            softmax_row(row, |j| visible[j] && (!causal || j <= i))
                .ok_or(Error::InvalidMask { row: i })?;
        }
        let ng = self.ng(ix);
        Ok(self.push(out, Op::MaskedSoftmax(ix), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, shift: Var, eps: f64) -> Result<Var> {
        let (ix, ig, is) = (self.idx(x), self.idx(gamma), self.idx(shift));
        let (xv, gv, sv) = (
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[is].value,
        );
        let d = xv.cols();
        if !xv.is_matrix() || gv.numel() != d || sv.numel() != d {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = xv.clone();
        for (row, orow) in xhat.chunks_mut(d).zip(out.data_mut().chunks_mut(d)) {
            let (mean, istd) = row_moments(row, eps);
            inv_std.push(istd);
            for j in 0..d {
                row[j] = (row[j] - mean) * istd;
                orow[j] = row[j] * gv.data()[j] + sv.data()[j];
            }
        }
        let ng = self.ng(ix) || self.ng(ig) || self.ng(is);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                shift: is,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Rotary embedding of `x[L × n_heads·d_head]` at the given positions.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64, n_heads: usize) -> Result<Var> {
        let ix = self.idx(x);
        let xv = &self.nodes[ix].value;
        let cols = xv.cols();
        if !xv.is_matrix() || positions.len() != xv.rows() || n_heads == 0 || cols % n_heads != 0 {
            return Err(Error::dim("rope", xv.shape(), &[positions.len(), n_heads]));
        }
        if (cols / n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embedding needs an even head width, got {}",
                cols / n_heads
            )));
        }
        let mut out = xv.clone();
        rope_rotate(out.data_mut(), cols, positions, base, n_heads, 1.0);
        let ng = self.ng(ix);
        Ok(self.push(
            out,
            Op::Rope {
                x: ix,
                positions: positions.to_vec(),
                base,
                n_heads,
            },
            ng,
        ))
    }

    /// `x / sum(x)` when `sum(x) >= threshold`, otherwise the uniform vector
    /// (which carries no gradient). Returns the variable and whether the
    /// uniform branch was taken.
    pub fn normalize_or_uniform(&mut self, x: Var, threshold: f64) -> (Var, bool) {
        let ix = self.idx(x);
        let xv = &self.nodes[ix].value;
        let total = xv.sum();
        let fallback = total < threshold;
        let out = if fallback {
            Tensor::full(xv.shape(), 1.0 / xv.numel() as f64)
        } else {
            xv.scale(1.0 / total)
        };
        let ng = self.ng(ix) && !fallback;
        let v = self.push(
            out,
            Op::NormalizeOrUniform {
                x: ix,
                total,
                fallback,
            },
            ng,
        );
        (v, fallback)
    }

    /// Mean over rows of `-log softmax(logits[t])[targets[t]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits);
        let lv = &self.nodes[il].value;
        if !lv.is_matrix() || lv.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let v = lv.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target {bad} outside vocabulary of {v}")));
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (row, &t) in probs.data_mut().chunks_mut(v).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let out = Tensor::scalar(loss / targets.len() as f64);
        let ng = self.ng(il);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: il,
                probs,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Row `i` from `a` where `take_a[i]`, otherwise from `b`.
    pub fn merge_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.shape() != bv.shape() || !av.is_matrix() || take_a.len() != av.rows() {
            return Err(Error::dim("merge_rows", av.shape(), bv.shape()));
        }
        let mut out = bv.clone();
        let d = av.cols();
        for (i, &t) in take_a.iter().enumerate() {
            if t {
                out.data_mut()[i * d..(i + 1) * d].copy_from_slice(av.row(i));
            }
        }
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(
            out,
            Op::MergeRows {
                a: ia,
                b: ib,
                take_a: take_a.to_vec(),
            },
            ng,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Tracking("loss was not recorded on this tape".into()));
        }
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(Error::Tracking(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(Tensor::ones(self.nodes[loss.index].value.shape()));

        for i in (0..=loss.index).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, t: Tensor| {
            if !self.nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let bt = val(*b).transpose().unwrap();
                    acc(*a, g.matmul(&bt).unwrap());
                }
                if self.ng(*b) {
                    let at = val(*a).transpose().unwrap();
                    acc(*b, at.matmul(g).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                acc(*b, g.zip_map(val(*a), |x, y| x * y).unwrap());
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if self.ng(*b) {
                    let d = g.cols();
                    let mut db = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        db.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    let shape = val(*b).shape().to_vec();
                    acc(*b, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Scale(x, c) => acc(*x, g.scale(*c)),
            Op::MulScalar(x, s) => {
                let sv = val(*s).data()[0];
                acc(*x, g.scale(sv));
                if self.ng(*s) {
                    let ds: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::new(val(*s).shape().to_vec(), vec![ds]).unwrap());
                }
            }
            Op::RowScale(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let d = xv.cols();
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for (row, &s) in dx.data_mut().chunks_mut(d).zip(wv.data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    acc(*x, dx);
                }
                if self.ng(*w) {
                    let dw: Vec<f64> = g
                        .data()
                        .chunks(d)
                        .zip(xv.data().chunks(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
            }
            Op::Tanh(x) => acc(*x, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)).unwrap()),
            Op::Gelu(x) => acc(*x, g.zip_map(val(*x), |gv, xv| gv * gelu_grad(xv)).unwrap()),
            Op::Transpose(x) => acc(*x, g.transpose().unwrap()),
            Op::GatherRows(x, rows) => {
                if self.ng(*x) {
                    let xv = val(*x);
                    let d = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                        dst.iter_mut().zip(g.row(k)).for_each(|(o, v)| *o += v);
                    }
                    acc(*x, dx);
                }
            }
            Op::GatherCols(x, cols) => {
                if self.ng(*x) {
                    let xv = val(*x);
                    let d = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        for (k, &c) in cols.iter().enumerate() {
                            dx.data_mut()[r * d + c] += g.at(r, k);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if self.ng(p) {
                        let part = g.data()[offset..offset + n].to_vec();
                        acc(p, Tensor::new(val(p).shape().to_vec(), part).unwrap());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if self.ng(p) {
                        let mut part = Vec::with_capacity(val(p).numel());
                        for r in 0..g.rows() {
                            part.extend_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        acc(p, Tensor::new(val(p).shape().to_vec(), part).unwrap());
                    }
                    offset += pc;
                }
            }
            Op::SumRows(x) => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let d = xv.cols();
                for row in dx.data_mut().chunks_mut(d) {
                    row.copy_from_slice(g.data());
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let l = y.cols();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(l).zip(y.data().chunks(l)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                shift,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma);
                let d = g.cols();
                if self.ng(*x) {
                    let mut dx = Vec::with_capacity(g.numel());
                    for ((grow, hrow), &istd) in
                        g.data().chunks(d).zip(xhat.chunks(d)).zip(inv_std)
                    {
                        let dh: Vec<f64> = grow.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        dx.extend(
                            dh.iter()
                                .zip(hrow)
                                .map(|(a, h)| istd * (a - mean_dh - h * mean_dh_h)),
                        );
                    }
                    acc(*x, Tensor::new(g.shape().to_vec(), dx).unwrap());
                }
                if self.ng(*gamma) || self.ng(*shift) {
                    let mut dgamma = vec![0.0; d];
                    let mut dshift = vec![0.0; d];
                    for (grow, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dgamma[j] += grow[j] * hrow[j];
                            dshift[j] += grow[j];
                        }
                    }
                    acc(*gamma, Tensor::new(gv.shape().to_vec(), dgamma).unwrap());
                    acc(*shift, Tensor::new(val(*shift).shape().to_vec(), dshift).unwrap());
                }
            }
            Op::Rope {
                x,
                positions,
                base,
                n_heads,
            } => {
                let mut dx = g.clone();
                let cols = dx.cols();
                rope_rotate(dx.data_mut(), cols, positions, *base, *n_heads, -1.0);
                acc(*x, dx);
            }
            Op::NormalizeOrUniform { x, total, fallback } => {
                if !fallback {
                    let y = &node.value;
                    let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                    acc(*x, g.map(|gv| (gv - dot) / total));
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let scale = g.data()[0] / targets.len() as f64;
                let mut dl = probs.clone();
                let v = dl.cols();
                for (row, &t) in dl.data_mut().chunks_mut(v).zip(targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                acc(*logits, dl);
            }
            Op::MergeRows { a, b, take_a } => {
                let d = g.cols();
                let mut ga = Tensor::zeros(g.shape());
                let mut gb = g.clone();
                for (i, &t) in take_a.iter().enumerate() {
                    if t {
                        ga.data_mut()[i * d..(i + 1) * d].copy_from_slice(g.row(i));
                        gb.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
        }
    }
}
