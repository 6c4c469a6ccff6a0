use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::param::{Param, ParamId};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs in the BCE loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
///
/// Handles are only meaningful for the graph (and tape generation) that
/// produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SquaredError(usize, usize),
    AbsoluteError(usize, usize),
    Bce { probs: usize, targets: Vec<f64> },
    Conv1d { x: usize, w: usize, b: usize, width: usize },
    Embedding { table: usize, ids: Vec<usize> },
    LstmCell { gates: usize, cell: usize },
    LayerNorm { x: usize, eps: f64 },
    Gather { x: usize, cols: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Vec<f64>>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    generation: u32,
}

/// Reverse-mode differentiation tape over dense row-major matrices.
///
/// Every value is a `rows x cols` matrix; vectors are `1 x n` and scalars are
/// `1 x 1`. A graph built with [`Graph::no_grad`] computes values only.
#[derive(Debug)]
pub struct Graph {
    tape: RefCell<Tape>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Vec<f64>>,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, p: &Param) -> Option<&[f64]> {
        self.params.get(&p.id()).map(Vec::as_slice)
    }

    /// Gradient for `p`, or zeros when `p` did not take part in the loss.
    pub fn get_or_zero(&self, p: &Param) -> Vec<f64> {
        self.get(p)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; p.len()])
    }

    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.id).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.params.keys()
    }

    pub fn by_id(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Sums another gradient map into this one (data-parallel merge).
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut ids: Vec<&ParamId> = self.params.keys().collect();
        ids.sort();
        ids.iter()
            .flat_map(|id| self.params[*id].iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            tape: RefCell::new(Tape::default()),
            record: true,
        }
    }

    /// A graph that evaluates values without recording backward rules.
    pub fn no_grad() -> Self {
        Graph {
            tape: RefCell::new(Tape::default()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Handles issued before the call become stale.
    pub fn clear(&self) {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.clear();
        tape.params.clear();
        tape.generation = tape.generation.wrapping_add(1);
    }

    fn check(&self, tape: &Tape, v: Var) -> Result<()> {
        if v.generation != tape.generation || v.id >= tape.nodes.len() {
            return Err(Error::State(format!(
                "node {} does not belong to the active tape (it was cleared)",
                v.id
            )));
        }
        Ok(())
    }

    fn push(
        &self,
        tape: &mut Tape,
        value: Vec<f64>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
        op: Op,
    ) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        tape.nodes.push(Node {
            value: Arc::new(value),
            rows,
            cols,
            requires_grad,
            op,
        });
        Var {
            id: tape.nodes.len() - 1,
            generation: tape.generation,
        }
    }

    /// A constant (never receives gradient).
    pub fn constant(&self, data: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(data, rows, cols, false)
    }

    /// A free leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&self, data: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(data, rows, cols, true)
    }

    fn leaf(&self, data: Vec<f64>, rows: usize, cols: usize, grad: bool) -> Result<Var> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::shape(
                "leaf",
                format!("{} values for shape [{rows}, {cols}]", data.len()),
            ));
        }
        let mut tape = self.tape.borrow_mut();
        Ok(self.push(&mut tape, data, rows, cols, grad, Op::Leaf))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Result<Var> {
        self.constant(vec![0.0; rows * cols], rows, cols)
    }

    /// Registers a parameter; repeated registration returns the same node.
    pub fn param(&self, p: &Param) -> Var {
        let mut tape = self.tape.borrow_mut();
        if let Some(&id) = tape.params.get(&p.id()) {
            return Var {
                id,
                generation: tape.generation,
            };
        }
        let (rows, cols) = p.dims();
        let requires_grad = self.record;
        tape.nodes.push(Node {
            value: p.shared(),
            rows,
            cols,
            requires_grad,
            op: if requires_grad {
                Op::Param(p.id())
            } else {
                Op::Leaf
            },
        });
        let id = tape.nodes.len() - 1;
        tape.params.insert(p.id(), id);
        Var {
            id,
            generation: tape.generation,
        }
    }

    /// Registers a parameter as a constant: values are read, gradients never flow.
    pub fn frozen(&self, p: &Param) -> Var {
        let (rows, cols) = p.dims();
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node {
            value: p.shared(),
            rows,
            cols,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var {
            id: tape.nodes.len() - 1,
            generation: tape.generation,
        }
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        let tape = self.tape.borrow();
        tape.nodes[v.id].value.as_ref().clone()
    }

    /// Runs `f` against the node's values without copying them.
    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&[f64]) -> T) -> T {
        let tape = self.tape.borrow();
        f(&tape.nodes[v.id].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let tape = self.tape.borrow();
        tape.nodes[v.id].value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let tape = self.tape.borrow();
        let n = &tape.nodes[v.id];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tape.borrow().nodes[v.id].requires_grad
    }

    // -- primitives ------------------------------------------------------

    fn unary(
        &self,
        name: &'static str,
        a: Var,
        f: impl Fn(&[f64], usize, usize) -> Vec<f64>,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, a).map_err(|e| annotate(name, e))?;
        let n = &tape.nodes[a.id];
        let (rows, cols, rg) = (n.rows, n.cols, n.requires_grad);
        let out = f(&n.value, rows, cols);
        Ok(self.push(&mut tape, out, rows, cols, rg, op(a.id)))
    }

    fn binary_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, a)?;
        self.check(&tape, b)?;
        let (na, nb) = (&tape.nodes[a.id], &tape.nodes[b.id]);
        if (na.rows, na.cols) != (nb.rows, nb.cols) {
            return Err(Error::shape(
                name,
                format!("[{}, {}] vs [{}, {}]", na.rows, na.cols, nb.rows, nb.cols),
            ));
        }
        let out = na.value.iter().zip(nb.value.iter()).map(|(x, y)| f(*x, *y)).collect();
        let (rows, cols, rg) = (na.rows, na.cols, na.requires_grad || nb.requires_grad);
        Ok(self.push(&mut tape, out, rows, cols, rg, op(a.id, b.id)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, a)?;
        self.check(&tape, b)?;
        let (na, nb) = (&tape.nodes[a.id], &tape.nodes[b.id]);
        if na.cols != nb.rows {
            return Err(Error::shape(
                "matmul",
                format!("[{}, {}] x [{}, {}]", na.rows, na.cols, nb.rows, nb.cols),
            ));
        }
        let (m, k, n) = (na.rows, na.cols, nb.cols);
        let mut out = vec![0.0; m * n];
        matmul_into(&na.value, &nb.value, &mut out, m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(&mut tape, out, m, n, rg, Op::Matmul(a.id, b.id)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, a)?;
        self.check(&tape, row)?;
        let (na, nr) = (&tape.nodes[a.id], &tape.nodes[row.id]);
        if nr.rows != 1 || nr.cols != na.cols {
            return Err(Error::shape(
                name,
                format!("[{}, {}] with row [{}, {}]", na.rows, na.cols, nr.rows, nr.cols),
            ));
        }
        let cols = na.cols;
        let out = na
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, nr.value[i % cols]))
            .collect();
        let (rows, rg) = (na.rows, na.requires_grad || nr.requires_grad);
        Ok(self.push(&mut tape, out, rows, cols, rg, op))
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a.id, row.id))
    }

    /// `a * row` elementwise, broadcasting a `1 x n` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a.id, row.id))
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.unary(
            "scale",
            a,
            |x, _, _| x.iter().map(|v| v * s).collect(),
            |i| Op::Scale(i, s),
        )
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x, _, _| x.iter().map(|v| v.tanh()).collect(), Op::Tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x, _, _| x.iter().map(|v| sigmoid(*v)).collect(),
            Op::Sigmoid,
        )
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x, _, _| x.iter().map(|v| v.max(0.0)).collect(), Op::Relu)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x, _, _| x.iter().map(|v| v.exp()).collect(), Op::Exp)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, |x, _, _| x.iter().map(|v| v.ln()).collect(), Op::Log)
    }

    /// Row-wise softmax.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.unary(
            "softmax",
            a,
            |x, rows, cols| {
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    softmax_row(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
                }
                out
            },
            Op::Softmax,
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        self.unary(
            "log_softmax",
            a,
            |x, rows, cols| {
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    log_softmax_row(
                        &x[r * cols..(r + 1) * cols],
                        &mut out[r * cols..(r + 1) * cols],
                    );
                }
                out
            },
            Op::LogSoftmax,
        )
    }

    /// Concatenates along columns; all parts share a row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        for &p in parts {
            self.check(&tape, p)?;
        }
        let rows = tape.nodes[parts[0].id].rows;
        if let Some(bad) = parts.iter().find(|p| tape.nodes[p.id].rows != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row count {} vs {}", tape.nodes[bad.id].rows, rows),
            ));
        }
        let cols: usize = parts.iter().map(|p| tape.nodes[p.id].cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let n = &tape.nodes[p.id];
                out.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
        }
        let rg = parts.iter().any(|p| tape.nodes[p.id].requires_grad);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(&mut tape, out, rows, cols, rg, Op::ConcatCols(ids)))
    }

    /// Stacks along rows; all parts share a column count.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        for &p in parts {
            self.check(&tape, p)?;
        }
        let cols = tape.nodes[parts[0].id].cols;
        if let Some(bad) = parts.iter().find(|p| tape.nodes[p.id].cols != cols) {
            return Err(Error::shape(
                "concat_rows",
                format!("column count {} vs {}", tape.nodes[bad.id].cols, cols),
            ));
        }
        let rows: usize = parts.iter().map(|p| tape.nodes[p.id].rows).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&tape.nodes[p.id].value);
        }
        let rg = parts.iter().any(|p| tape.nodes[p.id].requires_grad);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(&mut tape, out, rows, cols, rg, Op::ConcatRows(ids)))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, a)?;
        let n = &tape.nodes[a.id];
        if len == 0 || start + len > n.cols {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of [{}, {}]", start + len, n.rows, n.cols),
            ));
        }
        let mut out = Vec::with_capacity(n.rows * len);
        for r in 0..n.rows {
            out.extend_from_slice(&n.value[r * n.cols + start..r * n.cols + start + len]);
        }
        let (rows, rg) = (n.rows, n.requires_grad);
        Ok(self.push(&mut tape, out, rows, len, rg, Op::SliceCols { src: a.id, start }))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, a)?;
        let n = &tape.nodes[a.id];
        if len == 0 || start + len > n.rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of [{}, {}]", start + len, n.rows, n.cols),
            ));
        }
        let out = n.value[start * n.cols..(start + len) * n.cols].to_vec();
        let (cols, rg) = (n.cols, n.requires_grad);
        Ok(self.push(&mut tape, out, len, cols, rg, Op::SliceRows { src: a.id, start }))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, a)?;
        let n = &tape.nodes[a.id];
        if n.rows * n.cols != rows * cols {
            return Err(Error::shape(
                "reshape",
                format!("[{}, {}] to [{rows}, {cols}]", n.rows, n.cols),
            ));
        }
        let out = n.value.as_ref().clone();
        let rg = n.requires_grad;
        Ok(self.push(&mut tape, out, rows, cols, rg, Op::Reshape(a.id)))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.reduce("sum", a, |x| x.iter().sum(), Op::Sum)
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.reduce("mean", a, |x| x.iter().sum::<f64>() / x.len() as f64, Op::Mean)
    }

    fn reduce(
        &self,
        name: &'static str,
        a: Var,
        f: impl Fn(&[f64]) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, a).map_err(|e| annotate(name, e))?;
        let n = &tape.nodes[a.id];
        let out = vec![f(&n.value)];
        let rg = n.requires_grad;
        Ok(self.push(&mut tape, out, 1, 1, rg, op(a.id)))
    }

    fn pairwise_reduce(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, a)?;
        self.check(&tape, b)?;
        let (na, nb) = (&tape.nodes[a.id], &tape.nodes[b.id]);
        if (na.rows, na.cols) != (nb.rows, nb.cols) {
            return Err(Error::shape(
                name,
                format!("[{}, {}] vs [{}, {}]", na.rows, na.cols, nb.rows, nb.cols),
            ));
        }
        let total: f64 = na.value.iter().zip(nb.value.iter()).map(|(x, y)| f(x - y)).sum();
        let out = vec![total / na.value.len() as f64];
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(&mut tape, out, 1, 1, rg, op))
    }

    /// Mean of squared elementwise differences.
    pub fn squared_error(&self, a: Var, b: Var) -> Result<Var> {
        self.pairwise_reduce("squared_error", a, b, |d| d * d, Op::SquaredError(a.id, b.id))
    }

    /// Mean of absolute elementwise differences.
    pub fn absolute_error(&self, a: Var, b: Var) -> Result<Var> {
        self.pairwise_reduce("absolute_error", a, b, f64::abs, Op::AbsoluteError(a.id, b.id))
    }

    /// Mean binary cross-entropy `-[t ln p + (1-t) ln(1-p)]` with `p` clamped
    /// into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&self, probs: Var, targets: &[f64]) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, probs)?;
        let n = &tape.nodes[probs.id];
        if n.value.len() != targets.len() {
            return Err(Error::shape(
                "bce",
                format!("{} probabilities vs {} targets", n.value.len(), targets.len()),
            ));
        }
        let total: f64 = n
            .value
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let out = vec![total / targets.len() as f64];
        let rg = n.requires_grad;
        let op = Op::Bce {
            probs: probs.id,
            targets: targets.to_vec(),
        };
        Ok(self.push(&mut tape, out, 1, 1, rg, op))
    }

    /// Same-padded 1-D convolution over the rows of `x` (`L x C_in`).
    ///
    /// `w` is `(width * C_in) x C_out` with row index `k * C_in + c`;
    /// `b` is `1 x C_out`.
    pub fn conv1d(&self, x: Var, w: Var, b: Var, width: usize) -> Result<Var> {
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width {width} is even")));
        }
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, x)?;
        self.check(&tape, w)?;
        self.check(&tape, b)?;
        let (nx, nw, nb) = (&tape.nodes[x.id], &tape.nodes[w.id], &tape.nodes[b.id]);
        let (len, cin) = (nx.rows, nx.cols);
        let cout = nw.cols;
        if nw.rows != width * cin || nb.rows != 1 || nb.cols != cout {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input [{len}, {cin}], kernel [{}, {}], bias [{}, {}], width {width}",
                    nw.rows, nw.cols, nb.rows, nb.cols
                ),
            ));
        }
        let half = width / 2;
        let mut out = vec![0.0; len * cout];
        for l in 0..len {
            let orow = &mut out[l * cout..(l + 1) * cout];
            orow.copy_from_slice(&nb.value);
            for k in 0..width {
                let src = l as isize + k as isize - half as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..cin {
                    let xv = nx.value[src * cin + c];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &nw.value[(k * cin + c) * cout..(k * cin + c + 1) * cout];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let rg = nx.requires_grad || nw.requires_grad || nb.requires_grad;
        let op = Op::Conv1d {
            x: x.id,
            w: w.id,
            b: b.id,
            width,
        };
        Ok(self.push(&mut tape, out, len, cout, rg, op))
    }

    /// Gathers rows of `table` (`V x E`) at `ids`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, table)?;
        let n = &tape.nodes[table.id];
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id list"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= n.rows) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} outside table of {} rows", n.rows),
            ));
        }
        let e = n.cols;
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&n.value[i * e..(i + 1) * e]);
        }
        let rg = n.requires_grad;
        let op = Op::Embedding {
            table: table.id,
            ids: ids.to_vec(),
        };
        Ok(self.push(&mut tape, out, ids.len(), e, rg, op))
    }

    /// Fused LSTM pointwise update.
    ///
    /// `gates` is `1 x 4H` of pre-activations in (input, forget, cell, output)
    /// order; `cell` is `1 x H`. Returns `1 x 2H` holding `[h', c']`.
    pub fn lstm_cell(&self, gates: Var, cell: Var) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, gates)?;
        self.check(&tape, cell)?;
        let (ng, nc) = (&tape.nodes[gates.id], &tape.nodes[cell.id]);
        let h = nc.cols;
        if ng.rows != 1 || nc.rows != 1 || ng.cols != 4 * h {
            return Err(Error::shape(
                "lstm_cell",
                format!(
                    "gates [{}, {}] with cell [{}, {}]",
                    ng.rows, ng.cols, nc.rows, nc.cols
                ),
            ));
        }
        let mut out = vec![0.0; 2 * h];
        for j in 0..h {
            let i = sigmoid(ng.value[j]);
            let f = sigmoid(ng.value[h + j]);
            let g = ng.value[2 * h + j].tanh();
            let o = sigmoid(ng.value[3 * h + j]);
            let c = f * nc.value[j] + i * g;
            out[j] = o * c.tanh();
            out[h + j] = c;
        }
        let rg = ng.requires_grad || nc.requires_grad;
        let op = Op::LstmCell {
            gates: gates.id,
            cell: cell.id,
        };
        Ok(self.push(&mut tape, out, 1, 2 * h, rg, op))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        self.unary(
            "layer_norm",
            x,
            |v, rows, cols| {
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = &v[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                        *o = (x - mean) * inv;
                    }
                }
                out
            },
            |i| Op::LayerNorm { x: i, eps },
        )
    }

    /// Picks `x[r, cols[r]]` for every row, giving a `rows x 1` column.
    pub fn gather(&self, x: Var, cols: &[usize]) -> Result<Var> {
        let mut tape = self.tape.borrow_mut();
        self.check(&tape, x)?;
        let n = &tape.nodes[x.id];
        if cols.len() != n.rows || cols.iter().any(|&c| c >= n.cols) {
            return Err(Error::shape(
                "gather",
                format!("{} indices into [{}, {}]", cols.len(), n.rows, n.cols),
            ));
        }
        let out = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| n.value[r * n.cols + c])
            .collect();
        let (rows, rg) = (n.rows, n.requires_grad);
        let op = Op::Gather {
            x: x.id,
            cols: cols.to_vec(),
        };
        Ok(self.push(&mut tape, out, rows, 1, rg, op))
    }

    // -- backward -------------------------------------------------------

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tape = self.tape.borrow();
        self.check(&tape, loss)?;
        let root = &tape.nodes[loss.id];
        if root.rows * root.cols != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got [{}, {}]",
                root.rows, root.cols
            )));
        }
        let mut out = Gradients::default();
        if !root.requires_grad {
            return Ok(out);
        }
        let nodes = &tape.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |id: usize, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[id].requires_grad {
                    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, gout);
                }
                Op::Param(pid) => match out.params.get_mut(pid) {
                    Some(g) => g.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                    None => {
                        out.params.insert(*pid, gout);
                    }
                },
                Op::Matmul(a, b) => {
                    let (na, nb) = (&nodes[*a], &nodes[*b]);
                    let (m, k, n) = (na.rows, na.cols, nb.cols);
                    acc(*a, &mut |ga| {
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for c in 0..n {
                                    s += gout[r * n + c] * nb.value[p * n + c];
                                }
                                ga[r * k + p] += s;
                            }
                        }
                    });
                    acc(*b, &mut |gb| {
                        for r in 0..m {
                            for p in 0..k {
                                let av = na.value[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for c in 0..n {
                                    gb[p * n + c] += av * gout[r * n + c];
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |g| add_into(g, &gout));
                    acc(*b, &mut |g| add_into(g, &gout));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |g| add_into(g, &gout));
                    acc(*b, &mut |g| g.iter_mut().zip(&gout).for_each(|(x, d)| *x -= d));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    acc(*a, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * vb[j];
                        }
                    });
                    acc(*b, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * va[j];
                        }
                    });
                }
                Op::AddRow(a, r) => {
                    let cols = node.cols;
                    acc(*a, &mut |g| add_into(g, &gout));
                    acc(*r, &mut |g| {
                        for (j, d) in gout.iter().enumerate() {
                            g[j % cols] += d;
                        }
                    });
                }
                Op::MulRow(a, r) => {
                    let cols = node.cols;
                    let (va, vr) = (&nodes[*a].value, &nodes[*r].value);
                    acc(*a, &mut |g| {
                        for (j, d) in gout.iter().enumerate() {
                            g[j] += d * vr[j % cols];
                        }
                    });
                    acc(*r, &mut |g| {
                        for (j, d) in gout.iter().enumerate() {
                            g[j % cols] += d * va[j];
                        }
                    });
                }
                Op::Scale(a, s) => acc(*a, &mut |g| {
                    g.iter_mut().zip(&gout).for_each(|(x, d)| *x += d * s)
                }),
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(*a, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * (1.0 - y[j] * y[j]);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * y[j] * (1.0 - y[j]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    acc(*a, &mut |g| {
                        for j in 0..g.len() {
                            if x[j] > 0.0 {
                                g[j] += gout[j];
                            }
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    acc(*a, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * y[j];
                        }
                    });
                }
                Op::Log(a) => {
                    let x = &nodes[*a].value;
                    acc(*a, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] / x[j];
                        }
                    });
                }
                Op::Softmax(a) => {
                    let (y, cols) = (&node.value, node.cols);
                    acc(*a, &mut |g| {
                        for r in 0..node.rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &gout[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for c in 0..cols {
                                g[r * cols + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let (y, cols) = (&node.value, node.cols);
                    acc(*a, &mut |g| {
                        for r in 0..node.rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &gout[r * cols..(r + 1) * cols];
                            let total: f64 = gr.iter().sum();
                            for c in 0..cols {
                                g[r * cols + c] += gr[c] - yr[c].exp() * total;
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let cols = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p].cols;
                        acc(p, &mut |g| {
                            for r in 0..node.rows {
                                for c in 0..pc {
                                    g[r * pc + c] += gout[r * cols + offset + c];
                                }
                            }
                        });
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        acc(p, &mut |g| add_into(g, &gout[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::SliceCols { src, start } => {
                    let (sc, len) = (nodes[*src].cols, node.cols);
                    acc(*src, &mut |g| {
                        for r in 0..node.rows {
                            for c in 0..len {
                                g[r * sc + start + c] += gout[r * len + c];
                            }
                        }
                    });
                }
                Op::SliceRows { src, start } => {
                    let cols = node.cols;
                    acc(*src, &mut |g| {
                        add_into(&mut g[start * cols..start * cols + gout.len()], &gout)
                    });
                }
                Op::Reshape(a) => acc(*a, &mut |g| add_into(g, &gout)),
                Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gout[0])),
                Op::Mean(a) => {
                    let n = nodes[*a].value.len() as f64;
                    acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gout[0] / n));
                }
                Op::SquaredError(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let k = 2.0 * gout[0] / va.len() as f64;
                    acc(*a, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += k * (va[j] - vb[j]);
                        }
                    });
                    acc(*b, &mut |g| {
                        for j in 0..g.len() {
                            g[j] -= k * (va[j] - vb[j]);
                        }
                    });
                }
                Op::AbsoluteError(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let k = gout[0] / va.len() as f64;
                    acc(*a, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += k * sign(va[j] - vb[j]);
                        }
                    });
                    acc(*b, &mut |g| {
                        for j in 0..g.len() {
                            g[j] -= k * sign(va[j] - vb[j]);
                        }
                    });
                }
                Op::Bce { probs, targets } => {
                    let p = &nodes[*probs].value;
                    let k = gout[0] / targets.len() as f64;
                    acc(*probs, &mut |g| {
                        for j in 0..g.len() {
                            let pj = p[j];
                            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pj) {
                                continue;
                            }
                            let t = targets[j];
                            g[j] += k * (-t / pj + (1.0 - t) / (1.0 - pj));
                        }
                    });
                }
                Op::Conv1d { x, w, b, width } => {
                    let (nx, nw) = (&nodes[*x], &nodes[*w]);
                    let (len, cin, cout) = (nx.rows, nx.cols, nw.cols);
                    let half = width / 2;
                    acc(*b, &mut |g| {
                        for l in 0..len {
                            add_into(g, &gout[l * cout..(l + 1) * cout]);
                        }
                    });
                    let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                        for l in 0..len {
                            for k in 0..*width {
                                let src = l as isize + k as isize - half as isize;
                                if src >= 0 && (src as usize) < len {
                                    f(l, k, src as usize);
                                }
                            }
                        }
                    };
                    acc(*w, &mut |g| {
                        taps(&mut |l, k, src| {
                            let grow = &gout[l * cout..(l + 1) * cout];
                            for c in 0..cin {
                                let xv = nx.value[src * cin + c];
                                let wg = &mut g[(k * cin + c) * cout..(k * cin + c + 1) * cout];
                                for (o, d) in wg.iter_mut().zip(grow) {
                                    *o += xv * d;
                                }
                            }
                        })
                    });
                    acc(*x, &mut |g| {
                        taps(&mut |l, k, src| {
                            let grow = &gout[l * cout..(l + 1) * cout];
                            for c in 0..cin {
                                let wrow = &nw.value[(k * cin + c) * cout..(k * cin + c + 1) * cout];
                                g[src * cin + c] +=
                                    wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        })
                    });
                }
                Op::Embedding { table, ids } => {
                    let e = node.cols;
                    acc(*table, &mut |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut g[id * e..(id + 1) * e], &gout[r * e..(r + 1) * e]);
                        }
                    });
                }
                Op::LstmCell { gates, cell } => {
                    let (vg, vc) = (&nodes[*gates].value, &nodes[*cell].value);
                    let h = vc.len();
                    let mut dgates = vec![0.0; 4 * h];
                    let mut dcell = vec![0.0; h];
                    for j in 0..h {
                        let i = sigmoid(vg[j]);
                        let f = sigmoid(vg[h + j]);
                        let gg = vg[2 * h + j].tanh();
                        let o = sigmoid(vg[3 * h + j]);
                        let c = node.value[h + j];
                        let tc = c.tanh();
                        let dh = gout[j];
                        let dc = gout[h + j] + dh * o * (1.0 - tc * tc);
                        dgates[j] = dc * gg * i * (1.0 - i);
                        dgates[h + j] = dc * vc[j] * f * (1.0 - f);
                        dgates[2 * h + j] = dc * i * (1.0 - gg * gg);
                        dgates[3 * h + j] = dh * tc * o * (1.0 - o);
                        dcell[j] = dc * f;
                    }
                    acc(*gates, &mut |g| add_into(g, &dgates));
                    acc(*cell, &mut |g| add_into(g, &dcell));
                }
                Op::LayerNorm { x, eps } => {
                    let (vx, cols) = (&nodes[*x].value, node.cols);
                    let y = &node.value;
                    acc(*x, &mut |g| {
                        for r in 0..node.rows {
                            let row = &vx[r * cols..(r + 1) * cols];
                            let mean = row.iter().sum::<f64>() / cols as f64;
                            let var =
                                row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                            let inv = 1.0 / (var + eps).sqrt();
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &gout[r * cols..(r + 1) * cols];
                            let gmean = gr.iter().sum::<f64>() / cols as f64;
                            let gy =
                                gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                            for c in 0..cols {
                                g[r * cols + c] += inv * (gr[c] - gmean - yr[c] * gy);
                            }
                        }
                    });
                }
                Op::Gather { x, cols } => {
                    let xc = nodes[*x].cols;
                    acc(*x, &mut |g| {
                        for (r, &c) in cols.iter().enumerate() {
                            g[r * xc + c] += gout[r];
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn annotate(op: &'static str, e: Error) -> Error {
    match e {
        Error::State(msg) => Error::State(format!("{op}: {msg}")),
        other => other,
    }
}
