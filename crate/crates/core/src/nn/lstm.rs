use rand::Rng;

use super::INIT_SCALE;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Module, Param, Var};

/// Weights of one LSTM cell. Gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input_weight: Param,
    pub hidden_weight: Param,
    pub bias: Param,
    hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &Graph, hidden: usize) -> Result<Self> {
        Ok(LstmState {
            h: g.zeros(1, hidden)?,
            c: g.zeros(1, hidden)?,
        })
    }
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        LstmParams {
            input_weight: Param::uniform(format!("{name}.wx"), &[input, 4 * hidden], INIT_SCALE, rng),
            hidden_weight: Param::uniform(
                format!("{name}.wh"),
                &[hidden, 4 * hidden],
                INIT_SCALE,
                rng,
            ),
            bias: Param::new(format!("{name}.b"), &[4 * hidden], bias),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.input_weight.dims().0
    }

    /// `x W_x + b` for every row of `x` at once.
    pub fn project_inputs(&self, g: &Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, g.param(&self.input_weight))?;
        g.add_row(xw, g.param(&self.bias))
    }

    /// One step from a pre-projected input row (see [`Self::project_inputs`]).
    pub fn step_projected(&self, g: &Graph, xw: Var, state: LstmState) -> Result<LstmState> {
        let hw = g.matmul(state.h, g.param(&self.hidden_weight))?;
        let gates = g.add(xw, hw)?;
        let hc = g.lstm_cell(gates, state.c)?;
        Ok(LstmState {
            h: g.slice_cols(hc, 0, self.hidden)?,
            c: g.slice_cols(hc, self.hidden, self.hidden)?,
        })
    }

    /// Standard LSTM recurrence on a single `1 x input` row.
    pub fn step(&self, g: &Graph, x: Var, state: LstmState) -> Result<LstmState> {
        let (rows, cols) = g.shape(x);
        if rows != 1 || cols != self.input_dim() {
            return Err(Error::shape(
                "lstm_step",
                format!("input [{rows}, {cols}] for cell expecting [1, {}]", self.input_dim()),
            ));
        }
        for v in [state.h, state.c] {
            if g.shape(v) != (1, self.hidden) {
                return Err(Error::shape(
                    "lstm_step",
                    format!("state {:?} for hidden size {}", g.shape(v), self.hidden),
                ));
            }
        }
        let xw = self.project_inputs(g, x)?;
        self.step_projected(g, xw, state)
    }
}

impl Module for LstmParams {
    fn params(&self) -> Vec<&Param> {
        vec![&self.input_weight, &self.hidden_weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.input_weight, &mut self.hidden_weight, &mut self.bias]
    }
}

/// One bidirectional layer; optionally keeps only even-indexed output frames.
#[derive(Debug, Clone)]
pub struct BlstmLayer {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub subsample: bool,
}

impl BlstmLayer {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        hidden: usize,
        subsample: bool,
        rng: &mut R,
    ) -> Self {
        BlstmLayer {
            forward: LstmParams::new(&format!("{name}.fwd"), input, hidden, rng),
            backward: LstmParams::new(&format!("{name}.bwd"), input, hidden, rng),
            subsample,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden() + self.backward.hidden()
    }

    fn run(&self, g: &Graph, seq: Var) -> Result<Var> {
        let (len, _) = g.shape(seq);
        let run_dir = |cell: &LstmParams, order: &mut dyn Iterator<Item = usize>| {
            let proj = cell.project_inputs(g, seq)?;
            let mut state = LstmState::zeros(g, cell.hidden())?;
            let mut out = vec![None; len];
            for t in order {
                state = cell.step_projected(g, g.slice_rows(proj, t, 1)?, state)?;
                out[t] = Some(state.h);
            }
            Ok::<_, Error>(out.into_iter().map(Option::unwrap).collect::<Vec<_>>())
        };
        let fwd = run_dir(&self.forward, &mut (0..len))?;
        let bwd = run_dir(&self.backward, &mut (0..len).rev())?;
        let step = if self.subsample { 2 } else { 1 };
        let keep: Vec<usize> = (0..len).step_by(step).collect();
        let f = g.concat_rows(&keep.iter().map(|&t| fwd[t]).collect::<Vec<_>>())?;
        let b = g.concat_rows(&keep.iter().map(|&t| bwd[t]).collect::<Vec<_>>())?;
        g.concat_cols(&[f, b])
    }
}

impl Module for BlstmLayer {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.forward.params();
        p.extend(self.backward.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.forward.params_mut();
        p.extend(self.backward.params_mut());
        p
    }
}

/// Output length after the subsampling layers: each one maps `T` to `ceil(T / 2)`.
pub fn subsampled_len(len: usize, layers: &[BlstmLayer]) -> usize {
    layers
        .iter()
        .filter(|l| l.subsample)
        .fold(len, |t, _| t.div_ceil(2))
}

/// Stacked bidirectional encoder over a `T x D` sequence.
pub fn blstm_encode(g: &Graph, seq: Var, layers: &[BlstmLayer]) -> Result<Var> {
    let (len, dim) = g.shape(seq);
    let factor = 1usize << layers.iter().filter(|l| l.subsample).count();
    if len < factor {
        return Err(Error::Input(format!(
            "sequence of {len} frames is shorter than the subsampling factor {factor}"
        )));
    }
    if let Some(first) = layers.first() {
        if first.forward.input_dim() != dim {
            return Err(Error::shape(
                "blstm_encode",
                format!("feature dim {dim}, encoder expects {}", first.forward.input_dim()),
            ));
        }
    }
    layers.iter().try_fold(seq, |x, layer| layer.run(g, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;
    use crate::tensor::grad_check;

    fn layers(input: usize, hidden: usize, flags: &[bool], seed: u64) -> Vec<BlstmLayer> {
        let mut rng = seeded(seed, 0);
        let mut dim = input;
        flags
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let l = BlstmLayer::new(&format!("l{i}"), dim, hidden, s, &mut rng);
                dim = l.output_dim();
                l
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let mut rng = seeded(0, 0);
        let mut p = LstmParams::new("c", 3, 4, &mut rng);
        p.zero_all();
        let g = Graph::new();
        let x = g.constant(vec![1.0, -2.0, 0.5], 1, 3).unwrap();
        let s = p.step(&g, x, LstmState::zeros(&g, 4).unwrap()).unwrap();
        assert_eq!(g.value(s.h), vec![0.0; 4]);
        assert_eq!(g.value(s.c), vec![0.0; 4]);
    }

    #[test]
    fn saturated_forget_gate_carries_cell() {
        let mut rng = seeded(0, 0);
        let mut p = LstmParams::new("c", 2, 3, &mut rng);
        p.zero_all();
        p.bias.data_mut()[3..6].fill(20.0);
        let g = Graph::new();
        let v = vec![0.7, -0.3, 1.5];
        let state = LstmState {
            h: g.zeros(1, 3).unwrap(),
            c: g.constant(v.clone(), 1, 3).unwrap(),
        };
        let s = p.step(&g, g.zeros(1, 2).unwrap(), state).unwrap();
        for (a, b) in g.value(s.c).iter().zip(&v) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let mut rng = seeded(0, 0);
        let p = LstmParams::new("c", 2, 3, &mut rng);
        let g = Graph::new();
        let s = LstmState::zeros(&g, 3).unwrap();
        assert!(matches!(
            p.step(&g, g.zeros(1, 5).unwrap(), s),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = seeded(0, 0);
        let p = LstmParams::new("c", 2, 3, &mut rng);
        assert_eq!(&p.bias.data()[3..6], &[1.0, 1.0, 1.0]);
        assert!(p.bias.data()[..3].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn lstm_step_gradients() {
        let mut rng = seeded(4, 0);
        let mut p = LstmParams::new("c", 3, 4, &mut rng);
        for q in p.params_mut() {
            q.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let x = vec![0.3, -0.8, 1.1];
        let report = grad_check(
            &mut p,
            |p, g| {
                let xv = g.constant(x.clone(), 1, 3)?;
                let s0 = LstmState {
                    h: g.constant(vec![0.1, -0.2, 0.3, 0.05], 1, 4)?,
                    c: g.constant(vec![0.5, -0.4, 0.2, 0.9], 1, 4)?,
                };
                let s = p.step(g, xv, s0)?;
                let s = p.step(g, xv, s)?;
                let w = g.constant(vec![1.0, -2.0, 0.5, 1.5], 1, 4)?;
                g.sum(g.mul(g.add(s.h, s.c)?, w)?)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn subsampled_lengths() {
        for (t, expect) in [(8, 2), (7, 2), (4, 1), (5, 2), (64, 16)] {
            let ls = layers(2, 3, &[true, true], 1);
            let g = Graph::no_grad();
            let x = g.constant(vec![0.1; t * 2], t, 2).unwrap();
            let y = blstm_encode(&g, x, &ls).unwrap();
            assert_eq!(g.shape(y), (expect, 6), "T={t}");
            assert_eq!(subsampled_len(t, &ls), expect);
        }
    }

    #[test]
    fn too_short_for_subsampling() {
        let ls = layers(2, 3, &[true, true], 1);
        let g = Graph::no_grad();
        let x = g.constant(vec![0.1; 6], 3, 2).unwrap();
        assert!(matches!(blstm_encode(&g, x, &ls), Err(Error::Input(_))));
    }

    #[test]
    fn single_frame_zero_weights() {
        let mut ls = layers(3, 2, &[false], 1);
        ls.zero_all();
        let g = Graph::no_grad();
        let x = g.constant(vec![1.0, 2.0, 3.0], 1, 3).unwrap();
        let y = blstm_encode(&g, x, &ls).unwrap();
        assert_eq!(g.value(y), vec![0.0; 4]);
    }

    #[test]
    fn reversal_swaps_directions() {
        let ls = layers(3, 4, &[false], 9);
        let mut swapped = ls.clone();
        let layer = &mut swapped[0];
        std::mem::swap(&mut layer.forward, &mut layer.backward);
        let t = 6;
        let mut rng = seeded(10, 0);
        let data: Vec<f64> = (0..t * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut rev = Vec::new();
        for r in (0..t).rev() {
            rev.extend_from_slice(&data[r * 3..(r + 1) * 3]);
        }
        let g = Graph::no_grad();
        let y = g.value(blstm_encode(&g, g.constant(data, t, 3).unwrap(), &ls).unwrap());
        let yr = g.value(blstm_encode(&g, g.constant(rev, t, 3).unwrap(), &swapped).unwrap());
        for r in 0..t {
            let orig = &y[r * 8..(r + 1) * 8];
            let mirrored = &yr[(t - 1 - r) * 8..(t - r) * 8];
            for j in 0..4 {
                assert!((orig[j] - mirrored[4 + j]).abs() < 1e-12);
                assert!((orig[4 + j] - mirrored[j]).abs() < 1e-12);
            }
        }
    }
}
