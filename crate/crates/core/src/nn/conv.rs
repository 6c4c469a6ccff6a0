use rand::Rng;

use super::INIT_SCALE;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Module, Param, Var};

/// Same-padded 1-D convolution with an odd kernel width.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: Param,
    pub bias: Param,
    width: usize,
    in_channels: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if width % 2 == 0 {
            return Err(Error::Config(format!(
                "{name}: convolution width must be odd, got {width}"
            )));
        }
        Ok(Conv1d {
            kernel: Param::uniform(
                format!("{name}.kernel"),
                &[width * in_channels, out_channels],
                INIT_SCALE,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            width,
            in_channels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims().1
    }

    /// `L x C_in` in, `L x C_out` out.
    pub fn forward(&self, g: &Graph, seq: Var) -> Result<Var> {
        g.conv1d(seq, g.param(&self.kernel), g.param(&self.bias), self.width)
    }
}

impl Module for Conv1d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.kernel, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;

    fn run(conv: &Conv1d, data: Vec<f64>, rows: usize) -> Vec<f64> {
        let g = Graph::no_grad();
        let x = g.constant(data, rows, conv.in_channels()).unwrap();
        g.value(conv.forward(&g, x).unwrap())
    }

    #[test]
    fn identity_kernel() {
        let mut rng = seeded(0, 0);
        let mut conv = Conv1d::new("c", 2, 2, 5, &mut rng).unwrap();
        conv.zero_all();
        // center tap (k = 2) maps channel c to channel c
        let k = conv.kernel.data_mut();
        k[(2 * 2) * 2] = 1.0;
        k[(2 * 2 + 1) * 2 + 1] = 1.0;
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(run(&conv, x.clone(), 3), x);
    }

    #[test]
    fn ones_kernel_width_three() {
        let mut rng = seeded(0, 0);
        let mut conv = Conv1d::new("c", 1, 1, 3, &mut rng).unwrap();
        conv.zero_all();
        conv.kernel.data_mut().fill(1.0);
        assert_eq!(run(&conv, vec![1.0, 2.0, 3.0], 3), vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn zero_kernel() {
        let mut rng = seeded(0, 0);
        let mut conv = Conv1d::new("c", 3, 2, 3, &mut rng).unwrap();
        conv.zero_all();
        assert_eq!(run(&conv, vec![1.5; 12], 4), vec![0.0; 8]);
    }

    #[test]
    fn even_width_is_a_configuration_error() {
        let mut rng = seeded(0, 0);
        assert!(matches!(Conv1d::new("c", 1, 1, 4, &mut rng), Err(Error::Config(_))));
    }
}
