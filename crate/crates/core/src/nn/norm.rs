use crate::error::Result;
use crate::tensor::{Graph, Module, Param, Var};

/// Per-row normalization followed by a learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::filled(format!("{name}.gamma"), &[dim], 1.0),
            beta: Param::zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, NORM_EPS)?;
        g.add_row(g.mul_row(n, g.param(&self.gamma))?, g.param(&self.beta))
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
