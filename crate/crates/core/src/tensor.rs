//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so a tape over a large
//! embedding table stays cheap. [`Tape::backward`] walks the recording in
//! reverse and returns gradients for every trainable parameter that the loss
//! depends on.

use std::ops::Range;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{Gradients, ParamId, ParamStore};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    LogSigmoid(Var),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Cols(Var, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<Range<usize>>),
    SegmentWeightedSum {
        weights: Var,
        values: Var,
        segments: Vec<Range<usize>>,
    },
    Sum(Var),
    Pick(Var, usize, usize),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Matrix::zeros((rows, cols)))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.params.is_trainable(id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul shape mismatch: {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        let g = self.grad_of(&[a, b]);
        self.push(out, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add shape mismatch");
        let out = va + vb;
        let g = self.grad_of(&[a, b]);
        self.push(out, Op::Add(a, b), g)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row expects a single row");
        assert_eq!(va.ncols(), vr.ncols(), "add_row width mismatch");
        let out = va + vr;
        let g = self.grad_of(&[a, row]);
        self.push(out, Op::AddRow(a, row), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul shape mismatch");
        let out = va * vb;
        let g = self.grad_of(&[a, b]);
        self.push(out, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        let g = self.grad_of(&[a]);
        self.push(out, Op::Scale(a, factor), g)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).mapv(f);
        let g = self.grad_of(&[a]);
        self.push(out, op, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), elu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), move |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    /// `ln(sigmoid(x))`, stable for large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "hcat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("hcat row mismatch");
        let g = self.grad_of(parts);
        self.push(out, Op::HCat(parts.to_vec()), g)
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "vcat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("vcat column mismatch");
        let g = self.grad_of(parts);
        self.push(out, Op::VCat(parts.to_vec()), g)
    }

    /// Rows of `a` at `index`, in order, repeats allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros((index.len(), va.ncols()));
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).assign(&va.row(i));
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::GatherRows(a, index.to_vec()), g)
    }

    /// Columns `range` of `a`.
    pub fn cols(&mut self, a: Var, range: Range<usize>) -> Var {
        let out = self.value(a).slice(s![.., range.clone()]).to_owned();
        let g = self.grad_of(&[a]);
        self.push(out, Op::Cols(a, range.start), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let g = self.grad_of(&[a]);
        self.push(out, Op::Transpose(a), g)
    }

    /// Row-wise softmax. Entries where `mask` is false get probability zero;
    /// a row with no allowed entry becomes all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Array2<bool>>) -> Var {
        let va = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.dim(), va.dim(), "softmax mask shape mismatch");
        }
        let mut out = Matrix::zeros(va.dim());
        for r in 0..va.nrows() {
            let allowed = |c: usize| mask.is_none_or(|m| m[[r, c]]);
            let max = (0..va.ncols())
                .filter(|&c| allowed(c))
                .map(|c| va[[r, c]])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for c in 0..va.ncols() {
                if allowed(c) {
                    let e = (va[[r, c]] - max).exp();
                    out[[r, c]] = e;
                    total += e;
                }
            }
            out.row_mut(r).mapv_inplace(|x| x / total);
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::SoftmaxRows(a), g)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.mapv(|x| (x - max).exp()).sum().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), g)
    }

    /// Column-wise softmax within each contiguous block of rows.
    /// `segments` must tile `0..rows` in order; empty segments are allowed.
    pub fn segment_softmax(&mut self, a: Var, segments: &[Range<usize>]) -> Var {
        let va = self.value(a);
        check_tiling(segments, va.nrows());
        let mut out = Matrix::zeros(va.dim());
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            for c in 0..va.ncols() {
                let block = va.slice(s![seg.clone(), c]);
                let max = block.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let exps = block.mapv(|x| (x - max).exp());
                let total = exps.sum();
                out.slice_mut(s![seg.clone(), c]).assign(&(exps / total));
            }
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::SegmentSoftmax(a, segments.to_vec()), g)
    }

    /// Multi-head weighted sum: `weights` is `E x H`, `values` is `E x D`
    /// with `D` split into `H` equal column blocks. Output row `s` holds, per
    /// head `h`, the sum over rows `e` in segment `s` of
    /// `weights[e, h] * values[e, block h]`. Empty segments yield zero rows.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        segments: &[Range<usize>],
    ) -> Var {
        let (vw, vv) = (self.value(weights), self.value(values));
        assert_eq!(vw.nrows(), vv.nrows(), "weights/values row mismatch");
        let heads = vw.ncols();
        assert!(
            heads > 0 && vv.ncols() % heads == 0,
            "value width {} not divisible by {} heads",
            vv.ncols(),
            heads
        );
        check_tiling(segments, vw.nrows());
        let block = vv.ncols() / heads;
        let mut out = Matrix::zeros((segments.len(), vv.ncols()));
        for (si, seg) in segments.iter().enumerate() {
            for e in seg.clone() {
                for h in 0..heads {
                    let w = vw[[e, h]];
                    for k in h * block..(h + 1) * block {
                        out[[si, k]] += w * vv[[e, k]];
                    }
                }
            }
        }
        let g = self.grad_of(&[weights, values]);
        self.push(
            out,
            Op::SegmentWeightedSum {
                weights,
                values,
                segments: segments.to_vec(),
            },
            g,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push(out, Op::Sum(a), g)
    }

    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a)[[row, col]]);
        let g = self.grad_of(&[a]);
        self.push(out, Op::Pick(a, row, col), g)
    }

    /// Sum of several 1x1 nodes.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter();
        let first = *iter.next().expect("add_scalars of nothing");
        iter.fold(first, |acc, &t| self.add(acc, t))
    }

    /// Gradients of the 1x1 node `loss` with respect to every trainable
    /// parameter reached from it.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut params = Gradients::zeros_like(self.params);
        if !self.nodes[loss.0].needs_grad {
            return params;
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, d: Matrix| {
                if self.nodes[v.0].needs_grad {
                    match &mut grads[v.0] {
                        Some(acc) => *acc += &d,
                        slot => *slot = Some(d),
                    }
                }
            };
            let out = node.value.as_ref();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => params.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        send(*a, g.dot(&vb.t()));
                    }
                    if self.nodes[b.0].needs_grad {
                        send(*b, va.t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(a, row) => {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        send(*a, &g * vb);
                    }
                    if self.nodes[b.0].needs_grad {
                        send(*b, &g * va);
                    }
                }
                Op::Scale(a, f) => send(*a, g * *f),
                Op::Tanh(a) => {
                    let y = out.unwrap();
                    send(*a, &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Sigmoid(a) => {
                    let y = out.unwrap();
                    send(*a, &g * &y.mapv(|p| p * (1.0 - p)));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(*a, &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    send(*a, &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { v.exp() }));
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    send(*a, &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { *slope }));
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    send(*a, &g * &x.mapv(|v| sigmoid(-v)));
                }
                Op::HCat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        send(*p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::VCat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        send(*p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::GatherRows(a, index) => {
                    let mut d = Matrix::zeros(self.value(*a).dim());
                    for (r, &i) in index.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    send(*a, d);
                }
                Op::Cols(a, start) => {
                    let mut d = Matrix::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*a, d);
                }
                Op::Transpose(a) => send(*a, g.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let y = out.unwrap();
                    let gy = &g * y;
                    let row_dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, &gy - &(y * &row_dot));
                }
                Op::LogSoftmaxRows(a) => {
                    let y = out.unwrap();
                    let row_sum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, &g - &(y.mapv(f64::exp) * &row_sum));
                }
                Op::SegmentSoftmax(a, segments) => {
                    let y = out.unwrap();
                    let mut d = Matrix::zeros(y.dim());
                    for seg in segments.iter().filter(|s| !s.is_empty()) {
                        for c in 0..y.ncols() {
                            let ys = y.slice(s![seg.clone(), c]);
                            let gs = g.slice(s![seg.clone(), c]);
                            let dot: f64 =
                                Zip::from(&ys).and(&gs).fold(0.0, |acc, y, g| acc + y * g);
                            let mut ds = d.slice_mut(s![seg.clone(), c]);
                            Zip::from(&mut ds)
                                .and(&ys)
                                .and(&gs)
                                .for_each(|d, &y, &g| *d = y * (g - dot));
                        }
                    }
                    send(*a, d);
                }
                Op::SegmentWeightedSum {
                    weights,
                    values,
                    segments,
                } => {
                    let (vw, vv) = (self.value(*weights), self.value(*values));
                    let heads = vw.ncols();
                    let block = vv.ncols() / heads;
                    let mut dw = Matrix::zeros(vw.dim());
                    let mut dv = Matrix::zeros(vv.dim());
                    for (si, seg) in segments.iter().enumerate() {
                        for e in seg.clone() {
                            for h in 0..heads {
                                let w = vw[[e, h]];
                                let mut acc = 0.0;
                                for k in h * block..(h + 1) * block {
                                    acc += g[[si, k]] * vv[[e, k]];
                                    dv[[e, k]] += w * g[[si, k]];
                                }
                                dw[[e, h]] += acc;
                            }
                        }
                    }
                    send(*weights, dw);
                    send(*values, dv);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).dim();
                    send(*a, Matrix::from_elem(shape, g[[0, 0]]));
                }
                Op::Pick(a, r, c) => {
                    let mut d = Matrix::zeros(self.value(*a).dim());
                    d[[*r, *c]] = g[[0, 0]];
                    send(*a, d);
                }
            }
        }
        params
    }
}

fn check_tiling(segments: &[Range<usize>], rows: usize) {
    let mut next = 0;
    for seg in segments {
        assert_eq!(seg.start, next, "segments must tile rows contiguously");
        next = seg.end;
    }
    assert_eq!(next, rows, "segments must cover every row");
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}
