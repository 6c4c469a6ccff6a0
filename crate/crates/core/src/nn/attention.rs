use rand::Rng;

use super::conv::Conv1d;
use super::linear::Linear;
use super::INIT_SCALE;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Module, Param, Var};

/// What the location convolution looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Previous step's weights.
    Plain,
    /// Sum of all previous weights.
    Accumulated,
}

/// Attention weights carried between decoder steps.
#[derive(Debug, Clone, Copy)]
pub struct AttentionState {
    /// `1 x T` weights from the previous step (uniform before the first step).
    pub weights: Var,
    /// `1 x T` sum of every weight vector produced so far.
    pub accumulated: Var,
    pub steps: usize,
}

/// Additive attention with location features from a convolution over past weights.
///
/// `score_t = v . tanh(W q + V h_t + b + U conv(a)_t)`
#[derive(Debug, Clone)]
pub struct LocationAttention {
    pub query: Param,
    pub key: Linear,
    pub location_conv: Conv1d,
    pub location: Param,
    pub score: Param,
    pub mode: AttentionMode,
}

impl LocationAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        query_dim: usize,
        key_dim: usize,
        att_dim: usize,
        filters: usize,
        width: usize,
        mode: AttentionMode,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LocationAttention {
            query: Param::uniform(format!("{name}.query"), &[query_dim, att_dim], INIT_SCALE, rng),
            key: Linear::new(&format!("{name}.key"), key_dim, att_dim, rng),
            location_conv: Conv1d::new(&format!("{name}.loc_conv"), 1, filters, width, rng)?,
            location: Param::uniform(format!("{name}.loc_proj"), &[filters, att_dim], INIT_SCALE, rng),
            score: Param::uniform(format!("{name}.score"), &[att_dim, 1], INIT_SCALE, rng),
            mode,
        })
    }

    pub fn initial_state(&self, g: &Graph, len: usize) -> Result<AttentionState> {
        if len == 0 {
            return Err(Error::Input("attention over an empty key sequence".into()));
        }
        Ok(AttentionState {
            weights: g.constant(vec![1.0 / len as f64; len], 1, len)?,
            accumulated: g.zeros(1, len)?,
            steps: 0,
        })
    }

    /// Key projection, shared by every decoder step of an utterance.
    pub fn project_keys(&self, g: &Graph, keys: Var) -> Result<Var> {
        self.key.forward(g, keys)
    }

    /// One attention step. `keys` is `T x K`, `projected` its [`Self::project_keys`].
    /// Returns `(weights 1 x T, context 1 x K, next state)`.
    pub fn attend(
        &self,
        g: &Graph,
        query: Var,
        keys: Var,
        projected: Var,
        state: AttentionState,
    ) -> Result<(Var, Var, AttentionState)> {
        let (len, _) = g.shape(keys);
        if g.shape(state.weights) != (1, len) {
            return Err(Error::shape(
                "location_attention",
                format!("state of {:?} for {len} keys", g.shape(state.weights)),
            ));
        }
        let history = match self.mode {
            AttentionMode::Accumulated if state.steps > 0 => state.accumulated,
            _ => state.weights,
        };
        let loc = self.location_conv.forward(g, g.reshape(history, len, 1)?)?;
        let loc = g.matmul(loc, g.param(&self.location))?;
        let q = g.matmul(query, g.param(&self.query))?;
        let pre = g.add_row(g.add(projected, loc)?, q)?;
        let scores = g.matmul(g.tanh(pre)?, g.param(&self.score))?;
        let weights = g.softmax(g.reshape(scores, 1, len)?)?;
        let context = g.matmul(weights, keys)?;
        let next = AttentionState {
            weights,
            accumulated: g.add(state.accumulated, weights)?,
            steps: state.steps + 1,
        };
        Ok((weights, context, next))
    }

    /// Convenience wrapper that projects the keys itself.
    pub fn location_attention(
        &self,
        g: &Graph,
        query: Var,
        keys: Var,
        state: AttentionState,
    ) -> Result<(Var, Var, AttentionState)> {
        let (len, _) = g.shape(keys);
        if len == 0 {
            return Err(Error::Input("attention over an empty key sequence".into()));
        }
        let projected = self.project_keys(g, keys)?;
        self.attend(g, query, keys, projected, state)
    }
}

impl Module for LocationAttention {
    fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.query];
        p.extend(self.key.params());
        p.extend(self.location_conv.params());
        p.push(&self.location);
        p.push(&self.score);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.query];
        p.extend(self.key.params_mut());
        p.extend(self.location_conv.params_mut());
        p.push(&mut self.location);
        p.push(&mut self.score);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;
    use crate::tensor::grad_check;

    fn attention(mode: AttentionMode, seed: u64) -> LocationAttention {
        let mut rng = seeded(seed, 0);
        LocationAttention::new("att", 3, 4, 5, 2, 3, mode, &mut rng).unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed, 1);
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_key_gets_all_weight() {
        let att = attention(AttentionMode::Plain, 1);
        let g = Graph::no_grad();
        let keys = g.constant(vec![0.5, -1.0, 2.0, 0.25], 1, 4).unwrap();
        let q = g.constant(random(1, 3, 2), 1, 3).unwrap();
        let s = att.initial_state(&g, 1).unwrap();
        let (w, ctx, _) = att.location_attention(&g, q, keys, s).unwrap();
        assert_eq!(g.value(w), vec![1.0]);
        assert_eq!(g.value(ctx), vec![0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn equal_scores_average_the_keys() {
        let mut att = attention(AttentionMode::Plain, 1);
        att.score.data_mut().fill(0.0);
        let g = Graph::no_grad();
        let data = random(4, 4, 3);
        let keys = g.constant(data.clone(), 4, 4).unwrap();
        let q = g.constant(random(1, 3, 4), 1, 3).unwrap();
        let s = att.initial_state(&g, 4).unwrap();
        let (w, ctx, _) = att.location_attention(&g, q, keys, s).unwrap();
        assert_eq!(g.value(w), vec![0.25; 4]);
        let ctx = g.value(ctx);
        for c in 0..4 {
            let mean = (0..4).map(|r| data[r * 4 + c]).sum::<f64>() / 4.0;
            assert!((ctx[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn context_is_weighted_sum_of_keys() {
        let att = attention(AttentionMode::Accumulated, 5);
        let g = Graph::no_grad();
        let data = random(6, 4, 6);
        let keys = g.constant(data.clone(), 6, 4).unwrap();
        let mut s = att.initial_state(&g, 6).unwrap();
        for step in 0..3 {
            let q = g.constant(random(1, 3, 10 + step), 1, 3).unwrap();
            let (w, ctx, next) = att.location_attention(&g, q, keys, s).unwrap();
            let (w, ctx) = (g.value(w), g.value(ctx));
            for c in 0..4 {
                let mut naive = 0.0;
                for t in 0..6 {
                    naive += w[t] * data[t * 4 + c];
                }
                assert!((ctx[c] - naive).abs() < 1e-12);
            }
            s = next;
        }
    }

    #[test]
    fn weights_are_distributions_and_accumulate() {
        for mode in [AttentionMode::Plain, AttentionMode::Accumulated] {
            let att = attention(mode, 8);
            let g = Graph::no_grad();
            let keys = g.constant(random(7, 4, 9), 7, 4).unwrap();
            let mut s = att.initial_state(&g, 7).unwrap();
            for step in 1..=10 {
                let q = g.constant(random(1, 3, 20 + step), 1, 3).unwrap();
                let (w, _, next) = att.location_attention(&g, q, keys, s).unwrap();
                let w = g.value(w);
                assert!(w.iter().all(|&x| x >= 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let acc: f64 = g.value(next.accumulated).iter().sum();
                assert!((acc - step as f64).abs() < 1e-6);
                s = next;
            }
        }
    }

    #[test]
    fn empty_keys_rejected() {
        let att = attention(AttentionMode::Plain, 1);
        let g = Graph::no_grad();
        assert!(matches!(att.initial_state(&g, 0), Err(Error::Input(_))));
    }

    #[test]
    fn gradient_check_over_three_steps() {
        for mode in [AttentionMode::Plain, AttentionMode::Accumulated] {
            let mut att = attention(mode, 12);
            let mut rng = seeded(13, 0);
            for p in att.params_mut() {
                p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
            }
            let keys = random(5, 4, 14);
            let report = grad_check(
                &mut att,
                |att, g| {
                    let k = g.constant(keys.clone(), 5, 4)?;
                    let proj = att.project_keys(g, k)?;
                    let mut s = att.initial_state(g, 5)?;
                    let mut total = g.zeros(1, 1)?;
                    for step in 0..3 {
                        let q = g.constant(random(1, 3, 30 + step), 1, 3)?;
                        let (_, ctx, next) = att.attend(g, q, k, proj, s)?;
                        let w = g.constant(random(1, 4, 40 + step), 1, 4)?;
                        total = g.add(total, g.sum(g.mul(ctx, w)?)?)?;
                        s = next;
                    }
                    Ok(total)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_error() < 1e-4, "{mode:?}: {report:?}");
        }
    }
}
