//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so the tape is acyclic by construction and the backward
//! sweep is a single reverse pass. Binary elementwise operations broadcast an
//! operand along any dimension of size one.

use std::collections::HashMap;

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Ln,
    Square,
    Sqrt,
    Recip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Unary(Unary, Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    SegmentMean(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Value computed outside the tape with an explicit Jacobian
    /// `[output_len × input_len]` with respect to `input`.
    External { input: Var, jac: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_unary(f: Unary, x: f64) -> f64 {
    match f {
        Unary::Neg => -x,
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(0.0),
        Unary::Softplus => softplus(x),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Recip => 1.0 / x,
    }
}

/// Derivative of `f` at input `x` with output `y`.
fn unary_derivative(f: Unary, x: f64, y: f64) -> f64 {
    match f {
        Unary::Neg => -1.0,
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Recip => -y * y,
    }
}

fn apply_binary(op: Binary, a: f64, b: f64) -> f64 {
    match op {
        Binary::Add => a + b,
        Binary::Sub => a - b,
        Binary::Mul => a * b,
        Binary::Div => a / b,
        Binary::Min => a.min(b),
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    rr * t.cols() + cc
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Result of a backward sweep: parameter gradients plus adjoints of every node.
pub struct Adjoints {
    pub params: Gradients,
    nodes: Vec<Option<Tensor>>,
}

impl Adjoints {
    /// Adjoint of a node, zero-filled when the output does not depend on it.
    pub fn wrt(&self, var: Var, tape: &Tape) -> Tensor {
        self.nodes[var.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.value(var).shape();
            Tensor::zeros(r, c)
        })
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Tensor::scalar(value), Op::Input)
    }

    /// Leaf bound to a parameter of `store`. Repeated requests for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.tensor(id), Op::Param(id));
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(ta.shape(), tb.shape())?;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(apply_binary(op, ta.data()[bidx(ta, i, j)], tb.data()[bidx(tb, i, j)]));
            }
        }
        let value = Tensor::new(r, c, data)?;
        Ok(self.push(value, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Var {
        let value = self.value(a).map(|x| x + shift);
        self.push(value, Op::Offset(a, shift))
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Var {
        let value = self.value(a).map(|x| apply_unary(f, x));
        self.push(value, Op::Unary(f, a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(Unary::Recip, a)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `n×m → 1×m`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, x) in out.iter_mut().zip(t.row_slice(r)) {
                *o += x;
            }
        }
        self.push(Tensor::row(out), Op::SumRows(a))
    }

    /// Row sums: `n×m → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let value = Tensor::new(t.rows(), 1, out).expect("row count matches");
        self.push(value, Op::SumCols(a))
    }

    /// Means over consecutive blocks of `seg` rows: `(k·seg)×m → k×m`.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Result<Var> {
        let t = self.value(a);
        if seg == 0 || t.rows() % seg != 0 {
            return Err(Error::Shape(format!("{} rows do not split into blocks of {seg}", t.rows())));
        }
        let k = t.rows() / seg;
        let m = t.cols();
        let mut out = vec![0.0; k * m];
        for r in 0..t.rows() {
            let block = &mut out[(r / seg) * m..(r / seg + 1) * m];
            for (o, x) in block.iter_mut().zip(t.row_slice(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / seg as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let value = Tensor::new(k, m, out)?;
        Ok(self.push(value, Op::SegmentMean(a, seg)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                if t.rows() != rows {
                    return Err(Error::Shape(format!(
                        "concat of {} rows with {} rows",
                        rows,
                        t.rows()
                    )));
                }
                data.extend_from_slice(t.row_slice(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::Shape(format!("column slice {start}..{end} of {} columns", t.cols())));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let value = Tensor::new(t.rows(), end - start, data)?;
        Ok(self.push(value, Op::SliceCols(a, start, end)))
    }

    /// Records a value computed outside the tape together with its Jacobian
    /// (`[value.len() × input.len()]`, row-major) with respect to `input`.
    pub fn external(&mut self, input: Var, value: Tensor, jac: Vec<f64>) -> Result<Var> {
        let n_in = self.value(input).data().len();
        if jac.len() != value.data().len() * n_in {
            return Err(Error::Shape(format!(
                "external Jacobian has {} entries, expected {}x{}",
                jac.len(),
                value.data().len(),
                n_in
            )));
        }
        Ok(self.push(value, Op::External { input, jac }))
    }

    /// Reverse sweep from `out` seeded with `seed`, giving
    /// `∂(out·seed)/∂params` for every parameter in `store`.
    pub fn backward(&self, out: Var, seed: Tensor, store: &ParamStore) -> Result<Adjoints> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        adj[out.0] = Some(seed);
        let mut params = store.zeros_like();

        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(id) => {
                    if *id >= store.len() || store.entry(*id).data.len() != g.data().len() {
                        return Err(Error::Internal(format!(
                            "parameter node {id} does not belong to the supplied store"
                        )));
                    }
                    params.accumulate(*id, g.data());
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Binary(op, a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                    let (r, c) = g.shape();
                    for rr in 0..r {
                        for cc in 0..c {
                            let gv = g.data()[rr * c + cc];
                            let ia = bidx(ta, rr, cc);
                            let ib = bidx(tb, rr, cc);
                            let (x, y) = (ta.data()[ia], tb.data()[ib]);
                            let (da, db) = match op {
                                Binary::Add => (gv, gv),
                                Binary::Sub => (gv, -gv),
                                Binary::Mul => (gv * y, gv * x),
                                Binary::Div => (gv / y, -gv * x / (y * y)),
                                Binary::Min => {
                                    if x <= y {
                                        (gv, 0.0)
                                    } else {
                                        (0.0, gv)
                                    }
                                }
                            };
                            ga.data_mut()[ia] += da;
                            gb.data_mut()[ib] += db;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, f) => accumulate(&mut adj, *a, g.map(|x| x * f)),
                Op::Offset(a, _) => accumulate(&mut adj, *a, g),
                Op::Unary(f, a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((gv, xv), yv)| gv * unary_derivative(*f, *xv, *yv))
                        .collect();
                    accumulate(&mut adj, *a, Tensor::new(x.rows(), x.cols(), data)?);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv >= *lo && *xv <= *hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, Tensor::new(x.rows(), x.cols(), data)?);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut adj, *a, Tensor::full(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut data = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        data.extend_from_slice(g.data());
                    }
                    accumulate(&mut adj, *a, Tensor::new(r, c, data)?);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut data = Vec::with_capacity(r * c);
                    for rr in 0..r {
                        data.extend(std::iter::repeat_n(g.data()[rr], c));
                    }
                    accumulate(&mut adj, *a, Tensor::new(r, c, data)?);
                }
                Op::SegmentMean(a, seg) => {
                    let (r, c) = self.value(*a).shape();
                    let inv = 1.0 / *seg as f64;
                    let mut data = Vec::with_capacity(r * c);
                    for rr in 0..r {
                        data.extend(g.row_slice(rr / seg).iter().map(|x| x * inv));
                    }
                    accumulate(&mut adj, *a, Tensor::new(r, c, data)?);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let mut data = Vec::with_capacity(r * c);
                        for rr in 0..r {
                            data.extend_from_slice(&g.row_slice(rr)[start..start + c]);
                        }
                        accumulate(&mut adj, p, Tensor::new(r, c, data)?);
                        start += c;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = self.value(*a).shape();
                    let mut full = Tensor::zeros(r, c);
                    for rr in 0..r {
                        full.data_mut()[rr * c + start..rr * c + end].copy_from_slice(g.row_slice(rr));
                    }
                    accumulate(&mut adj, *a, full);
                }
                Op::External { input, jac } => {
                    let (r, c) = self.value(*input).shape();
                    let n_in = r * c;
                    let mut gi = vec![0.0; n_in];
                    for (o, gv) in g.data().iter().enumerate() {
                        for (dst, j) in gi.iter_mut().zip(&jac[o * n_in..(o + 1) * n_in]) {
                            *dst += gv * j;
                        }
                    }
                    accumulate(&mut adj, *input, Tensor::new(r, c, gi)?);
                }
                Op::Input => {}
            }
        }
        Ok(Adjoints { params, nodes: adj })
    }

    /// Gradient of a scalar output.
    pub fn grad(&self, out: Var, store: &ParamStore) -> Result<Gradients> {
        Ok(self.backward(out, Tensor::scalar(1.0), store)?.params)
    }

    /// Recomputes every node from its recorded inputs, using the current
    /// values of `store` for parameter leaves. Input and external nodes keep
    /// their recorded values.
    pub fn replay(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut scratch = Tape::new();
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input | Op::External { .. } => node.value.clone(),
                Op::Param(id) => store.tensor(*id),
                op => {
                    // Re-run the op on a scratch tape holding replayed inputs.
                    scratch.nodes.clear();
                    let remap = |v: &Var, s: &mut Tape| s.input(vals[v.0].clone());
                    let out = match op {
                        Op::MatMul(a, b) => {
                            let (a, b) = (remap(a, &mut scratch), remap(b, &mut scratch));
                            scratch.matmul(a, b)?
                        }
                        Op::Binary(f, a, b) => {
                            let (a, b) = (remap(a, &mut scratch), remap(b, &mut scratch));
                            scratch.binary(*f, a, b)?
                        }
                        Op::Scale(a, f) => {
                            let a = remap(a, &mut scratch);
                            scratch.scale(a, *f)
                        }
                        Op::Offset(a, f) => {
                            let a = remap(a, &mut scratch);
                            scratch.offset(a, *f)
                        }
                        Op::Unary(f, a) => {
                            let a = remap(a, &mut scratch);
                            scratch.unary(*f, a)
                        }
                        Op::Clamp(a, lo, hi) => {
                            let a = remap(a, &mut scratch);
                            scratch.clamp(a, *lo, *hi)
                        }
                        Op::Sum(a) => {
                            let a = remap(a, &mut scratch);
                            scratch.sum(a)
                        }
                        Op::SumRows(a) => {
                            let a = remap(a, &mut scratch);
                            scratch.sum_rows(a)
                        }
                        Op::SumCols(a) => {
                            let a = remap(a, &mut scratch);
                            scratch.sum_cols(a)
                        }
                        Op::SegmentMean(a, seg) => {
                            let a = remap(a, &mut scratch);
                            scratch.segment_mean(a, *seg)?
                        }
                        Op::ConcatCols(parts) => {
                            let ps: Vec<Var> = parts.iter().map(|p| remap(p, &mut scratch)).collect();
                            scratch.concat_cols(&ps)?
                        }
                        Op::SliceCols(a, s, e) => {
                            let a = remap(a, &mut scratch);
                            scratch.slice_cols(a, *s, *e)?
                        }
                        Op::Input | Op::Param(_) | Op::External { .. } => unreachable!(),
                    };
                    scratch.value(out).clone()
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
