use rand::Rng;

use super::INIT_SCALE;
use crate::error::Result;
use crate::tensor::{Graph, Module, Param, Var};

/// Affine layer `x W + b` applied to every row of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::uniform(format!("{name}.weight"), &[input, output], INIT_SCALE, rng),
            bias: Param::zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dims().0
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dims().1
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, g.param(&self.weight))?;
        g.add_row(xw, g.param(&self.bias))
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Param,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        Embedding {
            table: Param::uniform(format!("{name}.table"), &[vocab, dim], INIT_SCALE, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.dims().0
    }

    pub fn dim(&self) -> usize {
        self.table.dims().1
    }

    pub fn forward(&self, g: &Graph, ids: &[usize]) -> Result<Var> {
        g.embedding(g.param(&self.table), ids)
    }
}

impl Module for Embedding {
    fn params(&self) -> Vec<&Param> {
        vec![&self.table]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.table]
    }
}
