//! Character-level LSTM language model and its shallow-fusion scorer.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asr::{checkpoint_meta, LmScorer};
use crate::data::{Batch, Vocab, SOS};
use crate::error::{Error, Result};
use crate::nn::{Embedding, Linear, LstmParams, LstmState};
use crate::tensor::{accumulate, Adam, Checkpoint, Graph, Module, Param, Var};
use crate::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub cells: usize,
    pub layers: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            embed_dim: 16,
            cells: 32,
            layers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmModel {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub embed: Embedding,
    pub layers: Vec<LstmParams>,
    pub output: Linear,
}

/// Recurrent state as values: `h` and `c` of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LmModel {
    pub fn new<R: Rng + ?Sized>(config: LmConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        if config.layers == 0 || config.cells == 0 || config.embed_dim == 0 {
            return Err(Error::Config("language model sizes must be positive".into()));
        }
        let embed = Embedding::new("lm.embed", vocab.size(), config.embed_dim, rng);
        let layers = (0..config.layers)
            .map(|i| {
                let input = if i == 0 { config.embed_dim } else { config.cells };
                LstmParams::new(&format!("lm.lstm{i}"), input, config.cells, rng)
            })
            .collect();
        let output = Linear::new("lm.out", config.cells, vocab.num_outputs(), rng);
        Ok(LmModel {
            config,
            vocab,
            embed,
            layers,
            output,
        })
    }

    fn run(&self, g: &Graph, token: usize, states: &mut [LstmState]) -> Result<Var> {
        self.vocab.check_token(token)?;
        let mut x = self.embed.forward(g, &[token])?;
        for (layer, state) in self.layers.iter().zip(states.iter_mut()) {
            *state = layer.step(g, x, *state)?;
            x = state.h;
        }
        g.log_softmax(self.output.forward(g, x)?)
    }

    /// `-sum log p` of `tokens` (ending in eos) given the preceding tokens.
    pub fn sequence_loss(&self, g: &Graph, tokens: &[usize]) -> Result<Var> {
        crate::asr::check_targets(&self.vocab, tokens)?;
        let mut states = self.zero_states(g)?;
        let mut rows = Vec::with_capacity(tokens.len());
        let mut prev = SOS;
        for &t in tokens {
            rows.push(self.run(g, prev, &mut states)?);
            prev = t;
        }
        let out: Vec<usize> = tokens.iter().map(|&t| Vocab::output_index(t)).collect();
        let picked = g.gather(g.concat_rows(&rows)?, &out)?;
        g.scale(g.sum(picked)?, -1.0)
    }

    fn zero_states(&self, g: &Graph) -> Result<Vec<LstmState>> {
        (0..self.layers.len())
            .map(|_| LstmState::zeros(g, self.config.cells))
            .collect()
    }

    pub fn initial_state(&self) -> LmState {
        let z = vec![vec![0.0; self.config.cells]; self.layers.len()];
        LmState { h: z.clone(), c: z }
    }

    /// Reads `token`; returns the log-distribution of the next token over eos
    /// and the characters, and the new state.
    pub fn lm_step(&self, state: &LmState, token: usize) -> Result<(Vec<f64>, LmState)> {
        let g = Graph::no_grad();
        let cells = self.config.cells;
        let mut states = state
            .h
            .iter()
            .zip(&state.c)
            .map(|(h, c)| {
                Ok(LstmState {
                    h: g.constant(h.clone(), 1, cells)?,
                    c: g.constant(c.clone(), 1, cells)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let logp = self.run(&g, token, &mut states)?;
        let next = LmState {
            h: states.iter().map(|s| g.value(s.h)).collect(),
            c: states.iter().map(|s| g.value(s.c)).collect(),
        };
        Ok((g.value(logp), next))
    }

    /// `exp` of the mean per-token negative log-likelihood (eos included).
    pub fn perplexity(&self, texts: &[String]) -> Result<f64> {
        if texts.is_empty() {
            return Err(Error::Input("empty text corpus".into()));
        }
        let parts: Vec<(f64, usize)> = texts
            .par_iter()
            .map(|t| {
                let tokens = self.vocab.encode_with_eos(t)?;
                let g = Graph::no_grad();
                Ok((g.scalar(self.sequence_loss(&g, &tokens)?), tokens.len()))
            })
            .collect::<Result<_>>()?;
        let (nll, n) = parts.iter().fold((0.0, 0), |(a, b), (c, d)| (a + c, b + d));
        Ok((nll / n as f64).exp())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "lm",
            "config": self.config,
            "vocab": self.vocab.chars().iter().collect::<String>(),
        });
        let mut ck = Checkpoint::new(meta.to_string());
        ck.add_module("", self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (config, vocab) = checkpoint_meta::<LmConfig>(ck, "lm")?;
        let mut model = LmModel::new(config, vocab, &mut seeded(0, 0))?;
        ck.load_module("", &mut model)?;
        Ok(model)
    }
}

fn flatten(s: &LmState) -> Vec<f64> {
    s.h.iter().chain(&s.c).flatten().copied().collect()
}

impl LmScorer for LmModel {
    fn initial(&self) -> Vec<f64> {
        flatten(&self.initial_state())
    }

    fn score(&self, state: &[f64], token: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let cells = self.config.cells;
        let n = self.layers.len();
        if state.len() != 2 * n * cells {
            return Err(Error::Input(format!(
                "language model state of {} values, expected {}",
                state.len(),
                2 * n * cells
            )));
        }
        let rows: Vec<Vec<f64>> = state.chunks(cells).map(<[f64]>::to_vec).collect();
        let s = LmState {
            h: rows[..n].to_vec(),
            c: rows[n..].to_vec(),
        };
        let (logp, next) = self.lm_step(&s, token)?;
        Ok((logp, flatten(&next)))
    }
}

impl Module for LmModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.embed.params();
        p.extend(self.layers.iter().flat_map(|l| l.params()));
        p.extend(self.output.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.embed.params_mut();
        p.extend(self.layers.iter_mut().flat_map(|l| l.params_mut()));
        p.extend(self.output.params_mut());
        p
    }
}

/// Sum of sequence losses over the transcripts in `batch`, padding ignored.
pub fn batch_sequence_loss(g: &Graph, model: &LmModel, batch: &Batch) -> Result<Var> {
    let mut total = g.zeros(1, 1)?;
    for i in 0..batch.len() {
        if let Some(tokens) = batch.tokens_of(i) {
            total = g.add(total, model.sequence_loss(g, &tokens)?)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 20,
            batch_size: 16,
            seed: 1,
        }
    }
}

/// Minimizes next-token cross-entropy; returns the training-set perplexity
/// after every epoch.
pub fn lm_train(
    model: &mut LmModel,
    opt: &mut Adam,
    texts: &[String],
    cfg: &LmTrainConfig,
) -> Result<Vec<f64>> {
    if texts.is_empty() {
        return Err(Error::Input("empty text corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let encoded: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| model.vocab.encode_with_eos(t))
        .collect::<Result<_>>()?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<&Vec<usize>> = encoded.iter().collect();
        order.shuffle(&mut seeded(cfg.seed, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let m = &*model;
            let (_, mut grads) = accumulate(chunk, |g, _, t| Ok(Some(m.sequence_loss(g, t)?)))?;
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(model, &grads);
        }
        curve.push(model.perplexity(texts)?);
        log::info!("lm epoch {}: perplexity {:.4}", epoch + 1, curve.last().unwrap());
    }
    Ok(curve)
}


#[cfg(test)]
mod fusion_tests {
    use rand::Rng;

    use super::*;
    use crate::asr::{beam_search, AsrConfig, AsrModel, BeamConfig, Fusion};
    use crate::data::FeatureSequence;

    fn setup(seed: u64) -> (AsrModel, LmModel, FeatureSequence) {
        let vocab = Vocab::new("ab ".chars()).unwrap();
        let cfg = AsrConfig {
            feature_dim: 3,
            encoder_cells: 4,
            decoder_cells: 5,
            embed_dim: 3,
            att_dim: 3,
            att_filters: 2,
            att_width: 3,
            subsample_layers: 1,
            ..AsrConfig::default()
        };
        let mut asr = AsrModel::new(cfg, vocab.clone(), &mut seeded(seed, 0)).unwrap();
        let mut lm = LmModel::new(LmConfig { embed_dim: 3, cells: 4, layers: 1 }, vocab, &mut seeded(seed, 1))
            .unwrap();
        let mut rng = seeded(seed, 2);
        for p in asr.params_mut().into_iter().chain(lm.params_mut()) {
            p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5));
        }
        let data = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        (asr, lm, FeatureSequence::new(10, 3, data).unwrap())
    }

    #[test]
    fn zero_weight_fusion_is_plain_decoding() {
        for seed in 0..5 {
            let (asr, lm, x) = setup(seed);
            let cfg = BeamConfig { beam: 4, ..BeamConfig::default() };
            let plain = beam_search(&asr, &x, &cfg, None).unwrap();
            let fused = beam_search(&asr, &x, &cfg, Some(Fusion { lm: &lm, weight: 0.0 })).unwrap();
            assert_eq!(plain.len(), fused.len());
            for (a, b) in plain.iter().zip(&fused) {
                assert_eq!(a.tokens, b.tokens);
                assert_eq!(a.score.to_bits(), b.score.to_bits());
            }
        }
    }

    #[test]
    fn fused_step_scores_are_linear() {
        for seed in 0..5 {
            let (asr, lm, x) = setup(seed);
            let weight = 0.7;
            let cfg = BeamConfig { beam: 3, ..BeamConfig::default() };
            let hyps = beam_search(&asr, &x, &cfg, Some(Fusion { lm: &lm, weight })).unwrap();
            let h = &hyps[0];
            let g = Graph::no_grad();
            let enc = asr.prepare(&g, &x).unwrap();
            let (_, max_len) = cfg.length_bounds(enc.frames);
            let asr_rows = g.value(asr.teacher_forced(&g, &enc, &h.tokens).unwrap());
            let v = asr.num_outputs();
            let mut state = lm.initial_state();
            let mut prev = SOS;
            for (l, &t) in h.tokens.iter().enumerate() {
                if l == max_len {
                    assert_eq!(h.per_step[l], 0.0);
                    break;
                }
                let (lm_lp, next) = lm.lm_step(&state, prev).unwrap();
                let o = Vocab::output_index(t);
                let want = asr_rows[l * v + o] + weight * lm_lp[o];
                assert!((h.per_step[l] - want).abs() < 1e-12, "step {l}");
                state = next;
                prev = t;
            }
        }
    }
}
