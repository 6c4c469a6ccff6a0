use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;

use super::{AsrModel, DecoderState, Encoded};
use crate::data::{FeatureSequence, Utterance, Vocab, EOS, SOS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// A finished decoding hypothesis. `tokens` ends with eos; `per_step` holds the
/// score added by each token (the eos forced at the length limit adds 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub per_step: Vec<f64>,
}

impl Hypothesis {
    pub fn text(&self, vocab: &Vocab) -> String {
        vocab.decode(&self.tokens)
    }

    /// Number of characters (tokens before eos).
    pub fn len_chars(&self) -> usize {
        self.tokens.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 20,
            min_ratio: 0.2,
            max_ratio: 0.8,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !(0.0 < self.min_ratio && self.min_ratio < self.max_ratio && self.max_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "length ratios must satisfy 0 < min < max <= 1, got {} and {}",
                self.min_ratio, self.max_ratio
            )));
        }
        Ok(())
    }

    /// `(min, max)` number of characters for an encoder output of `frames` frames.
    pub fn length_bounds(&self, frames: usize) -> (usize, usize) {
        length_bounds(frames, self.min_ratio, self.max_ratio)
    }
}

pub(crate) fn length_bounds(frames: usize, min_ratio: f64, max_ratio: f64) -> (usize, usize) {
    let min = (min_ratio * frames as f64).floor() as usize;
    let max = ((max_ratio * frames as f64).floor() as usize).max(1);
    (min.min(max), max)
}

/// Incremental language model consumed by shallow fusion.
pub trait LmScorer: Sync {
    /// Recurrent state before any token has been read.
    fn initial(&self) -> Vec<f64>;

    /// Reads `token`; returns log-probabilities of the next token over the ASR
    /// output classes (eos first, then the characters) and the new state.
    fn score(&self, state: &[f64], token: usize) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Shallow fusion: each step scores `log p_asr + weight * log p_lm`.
#[derive(Clone, Copy)]
pub struct Fusion<'a> {
    pub lm: &'a dyn LmScorer,
    pub weight: f64,
}

struct Live {
    tokens: Vec<usize>,
    score: f64,
    per_step: Vec<f64>,
    state: DecoderState,
    lm: Option<(Vec<f64>, Vec<f64>)>,
}

struct Candidate {
    parent: usize,
    token: usize,
    step: f64,
    score: f64,
    tokens: Vec<usize>,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-constrained beam search. Eos may only follow at least `min` characters;
/// a hypothesis reaching `max` characters is closed with an unscored eos.
/// Returns at most `beam` finished hypotheses, best first; exact score ties go
/// to the lexicographically smaller token sequence.
pub fn beam_search(
    model: &AsrModel,
    x: &FeatureSequence,
    cfg: &BeamConfig,
    fusion: Option<Fusion<'_>>,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let g = Graph::no_grad();
    let enc = model.prepare(&g, x)?;
    let (min_len, max_len) = cfg.length_bounds(enc.frames);
    let lm_start = match fusion {
        Some(f) => Some(f.lm.score(&f.lm.initial(), SOS)?),
        None => None,
    };
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        per_step: Vec::new(),
        state: model.initial_state(&g, &enc)?,
        lm: lm_start,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        let mut candidates = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (k, h) in live.iter().enumerate() {
            let extend = |token: usize, step: f64| {
                let mut tokens = h.tokens.clone();
                tokens.push(token);
                Candidate {
                    parent: k,
                    token,
                    step,
                    score: h.score + step,
                    tokens,
                }
            };
            if h.tokens.len() >= max_len {
                candidates.push(extend(EOS, 0.0));
                next_states.push(None);
                continue;
            }
            let prev = h.tokens.last().copied().unwrap_or(SOS);
            let (logp, next) = model.decode_step(&g, &enc, prev, h.state)?;
            let logp = g.value(logp);
            for (o, &lp) in logp.iter().enumerate() {
                let token = Vocab::output_token(o);
                if token == EOS && h.tokens.len() < min_len {
                    continue;
                }
                let step = match (&h.lm, fusion) {
                    (Some((lm_lp, _)), Some(f)) => lp + f.weight * lm_lp[o],
                    _ => lp,
                };
                candidates.push(extend(token, step));
            }
            next_states.push(Some(next));
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.beam);

        let mut next_live = Vec::new();
        for c in candidates {
            let parent = &live[c.parent];
            let mut per_step = parent.per_step.clone();
            per_step.push(c.step);
            if c.token == EOS {
                finished.push(Hypothesis {
                    tokens: c.tokens,
                    score: c.score,
                    per_step,
                });
                continue;
            }
            let lm = match (&parent.lm, fusion) {
                (Some((_, st)), Some(f)) => Some(f.lm.score(st, c.token)?),
                _ => None,
            };
            next_live.push(Live {
                tokens: c.tokens,
                score: c.score,
                per_step,
                state: next_states[c.parent].expect("extended hypotheses were decoded"),
                lm,
            });
        }
        live = next_live;
    }

    finished.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    finished.truncate(cfg.beam);
    Ok(finished)
}

/// Step-by-step argmax under the same length constraints as [`beam_search`];
/// ties go to the lower token id.
pub fn greedy_decode(
    model: &AsrModel,
    x: &FeatureSequence,
    min_ratio: f64,
    max_ratio: f64,
) -> Result<Hypothesis> {
    let g = Graph::no_grad();
    let enc = model.prepare(&g, x)?;
    let (min_len, max_len) = length_bounds(enc.frames, min_ratio, max_ratio);
    let mut state = model.initial_state(&g, &enc)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        per_step: Vec::new(),
    };
    loop {
        if hyp.tokens.len() >= max_len {
            hyp.tokens.push(EOS);
            hyp.per_step.push(0.0);
            return Ok(hyp);
        }
        let prev = hyp.tokens.last().copied().unwrap_or(SOS);
        let (logp, next) = model.decode_step(&g, &enc, prev, state)?;
        state = next;
        let logp = g.value(logp);
        let first = if hyp.tokens.len() < min_len { 1 } else { 0 };
        let mut best = first;
        for o in first..logp.len() {
            if logp[o] > logp[best] {
                best = o;
            }
        }
        let token = Vocab::output_token(best);
        hyp.tokens.push(token);
        hyp.per_step.push(logp[best]);
        hyp.score += logp[best];
        if token == EOS {
            return Ok(hyp);
        }
    }
}

/// An ancestral sample and its differentiable log-probability.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Sampled tokens, always ending in eos.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of the sampled tokens; an eos appended at
    /// the length limit contributes nothing.
    pub log_prob: Var,
    pub truncated: bool,
}

/// Draws `n` independent sequences token by token from the decoder's softmax
/// (divided by `temperature`) until eos, truncating at `max_ratio * T'` characters.
pub fn sample_sequences<R: Rng + ?Sized>(
    model: &AsrModel,
    g: &Graph,
    enc: &Encoded,
    n: usize,
    temperature: f64,
    max_ratio: f64,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if n < 1 {
        return Err(Error::Config("number of samples must be at least 1".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if !(max_ratio > 0.0) {
        return Err(Error::Config(format!("max ratio must be positive, got {max_ratio}")));
    }
    let max_len = ((max_ratio * enc.frames as f64).floor() as usize).max(1);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut state = model.initial_state(g, enc)?;
        let mut tokens = Vec::new();
        let mut rows = Vec::new();
        let mut outs = Vec::new();
        let mut truncated = false;
        loop {
            if tokens.len() >= max_len {
                tokens.push(EOS);
                truncated = true;
                break;
            }
            let prev = tokens.last().copied().unwrap_or(SOS);
            let (logits, next) = model.step_logits(g, enc, prev, state)?;
            state = next;
            let logits = if temperature == 1.0 {
                logits
            } else {
                g.scale(logits, 1.0 / temperature)?
            };
            let logp = g.log_softmax(logits)?;
            let o = g.with_value(logp, |lp| draw(lp, rng));
            rows.push(logp);
            outs.push(o);
            let token = Vocab::output_token(o);
            tokens.push(token);
            if token == EOS {
                break;
            }
        }
        let picked = g.gather(g.concat_rows(&rows)?, &outs)?;
        samples.push(Sample {
            tokens,
            log_prob: g.sum(picked)?,
            truncated,
        });
    }
    Ok(samples)
}

/// Inverse-CDF draw from a log-distribution.
fn draw<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

/// Best hypothesis per utterance, decoded in parallel; output order follows `utts`.
pub fn decode_corpus(
    model: &AsrModel,
    utts: &[Utterance],
    cfg: &BeamConfig,
    fusion: Option<Fusion<'_>>,
) -> Result<Vec<(String, Hypothesis)>> {
    utts.par_iter()
        .map(|u| {
            let x = u.require_features()?;
            let best = beam_search(model, x, cfg, fusion)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))?;
            Ok((u.id.clone(), best))
        })
        .collect()
}
