use std::fmt;
use std::str::FromStr;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Identifier for every primitive the tape knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Matmul,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    ConcatCols,
    ConcatRows,
    SliceCols,
    SliceRows,
    Reshape,
    Sum,
    Mean,
    SquaredError,
    AbsoluteError,
    Bce,
    Conv1d,
    Embedding,
    LstmCell,
    LayerNorm,
    Gather,
}

impl Primitive {
    pub const ALL: [Primitive; 29] = [
        Primitive::Matmul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::AddRow,
        Primitive::MulRow,
        Primitive::Scale,
        Primitive::Tanh,
        Primitive::Sigmoid,
        Primitive::Relu,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::ConcatCols,
        Primitive::ConcatRows,
        Primitive::SliceCols,
        Primitive::SliceRows,
        Primitive::Reshape,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::SquaredError,
        Primitive::AbsoluteError,
        Primitive::Bce,
        Primitive::Conv1d,
        Primitive::Embedding,
        Primitive::LstmCell,
        Primitive::LayerNorm,
        Primitive::Gather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddRow => "add_row",
            Primitive::MulRow => "mul_row",
            Primitive::Scale => "scale",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::ConcatCols => "concat_cols",
            Primitive::ConcatRows => "concat_rows",
            Primitive::SliceCols => "slice_cols",
            Primitive::SliceRows => "slice_rows",
            Primitive::Reshape => "reshape",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SquaredError => "squared_error",
            Primitive::AbsoluteError => "absolute_error",
            Primitive::Bce => "bce",
            Primitive::Conv1d => "conv1d",
            Primitive::Embedding => "embedding",
            Primitive::LstmCell => "lstm_cell",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Gather => "gather",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown primitive `{s}`")))
    }
}

/// Non-tensor arguments for [`Graph::apply`].
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub scalar: Option<f64>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub width: Option<usize>,
    pub indices: Vec<usize>,
    pub targets: Vec<f64>,
}

fn need<T: Copy>(v: Option<T>, prim: Primitive, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("{prim} requires attribute `{what}`")))
}

impl Graph {
    /// Generic dispatch over [`Primitive`]; typed methods are the usual entry point.
    pub fn apply(&self, prim: Primitive, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(
                    prim.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ))
            }
        };
        match prim {
            Primitive::ConcatCols => return self.concat_cols(inputs),
            Primitive::ConcatRows => return self.concat_rows(inputs),
            Primitive::Matmul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::AddRow
            | Primitive::MulRow
            | Primitive::SquaredError
            | Primitive::AbsoluteError
            | Primitive::LstmCell => arity(2)?,
            Primitive::Conv1d => arity(3)?,
            _ => arity(1)?,
        }
        let a = inputs[0];
        match prim {
            Primitive::Matmul => self.matmul(a, inputs[1]),
            Primitive::Add => self.add(a, inputs[1]),
            Primitive::Sub => self.sub(a, inputs[1]),
            Primitive::Mul => self.mul(a, inputs[1]),
            Primitive::AddRow => self.add_row(a, inputs[1]),
            Primitive::MulRow => self.mul_row(a, inputs[1]),
            Primitive::Scale => self.scale(a, need(attrs.scalar, prim, "scalar")?),
            Primitive::Tanh => self.tanh(a),
            Primitive::Sigmoid => self.sigmoid(a),
            Primitive::Relu => self.relu(a),
            Primitive::Exp => self.exp(a),
            Primitive::Log => self.log(a),
            Primitive::Softmax => self.softmax(a),
            Primitive::LogSoftmax => self.log_softmax(a),
            Primitive::SliceCols => self.slice_cols(
                a,
                need(attrs.start, prim, "start")?,
                need(attrs.len, prim, "len")?,
            ),
            Primitive::SliceRows => self.slice_rows(
                a,
                need(attrs.start, prim, "start")?,
                need(attrs.len, prim, "len")?,
            ),
            Primitive::Reshape => self.reshape(
                a,
                need(attrs.rows, prim, "rows")?,
                need(attrs.cols, prim, "cols")?,
            ),
            Primitive::Sum => self.sum(a),
            Primitive::Mean => self.mean(a),
            Primitive::SquaredError => self.squared_error(a, inputs[1]),
            Primitive::AbsoluteError => self.absolute_error(a, inputs[1]),
            Primitive::Bce => self.bce(a, &attrs.targets),
            Primitive::Conv1d => {
                self.conv1d(a, inputs[1], inputs[2], need(attrs.width, prim, "width")?)
            }
            Primitive::Embedding => self.embedding(a, &attrs.indices),
            Primitive::LstmCell => self.lstm_cell(a, inputs[1]),
            Primitive::LayerNorm => self.layer_norm(a, attrs.scalar.unwrap_or(1e-5)),
            Primitive::Gather => self.gather(a, &attrs.indices),
            Primitive::ConcatCols | Primitive::ConcatRows => unreachable!(),
        }
    }

    /// Like [`Graph::apply`] but resolves the primitive by name.
    pub fn apply_named(&self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        self.apply(name.parse()?, inputs, attrs)
    }
}
