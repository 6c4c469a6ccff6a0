use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{tte_loss, TteModel};
use crate::asr::EncoderStates;
use crate::error::{Error, Result};
use crate::seeded;
use crate::tensor::{accumulate, Adam, Graph};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TteTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TteTrainConfig {
    fn default() -> Self {
        TteTrainConfig {
            epochs: 30,
            batch_size: 8,
            seed: 1,
        }
    }
}

/// A transcript (eos-terminated tokens) with the encoder states it should
/// reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct TtePair {
    pub tokens: Vec<usize>,
    pub target: EncoderStates,
}

fn item_stream(epoch: usize, index: usize) -> u64 {
    ((epoch as u64) << 32) | index as u64
}

/// Trains on `pairs` in train mode; returns the mean per-utterance loss of
/// every epoch.
pub fn tte_train(
    model: &mut TteModel,
    opt: &mut Adam,
    pairs: &[TtePair],
    cfg: &TteTrainConfig,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Input("no TTE training pairs".into()));
    }
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut seeded(cfg.seed, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let m = &*model;
            let (values, mut grads) = accumulate(chunk, |g, _, &i| {
                let mut rng = seeded(cfg.seed ^ 0x7465, item_stream(epoch, i));
                let p = &pairs[i];
                let pred = m.decode_teacher_forced(g, &p.tokens, &p.target, true, &mut rng)?;
                Ok(Some(tte_loss(g, &pred, &p.target)?))
            })?;
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(model, &grads);
            total += values.iter().sum::<f64>();
        }
        let mean = total / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("TTE loss, epoch {epoch}")));
        }
        log::info!("tte epoch {epoch}: loss {mean:.4}");
        losses.push(mean);
    }
    Ok(losses)
}

/// Mean teacher-forced loss in evaluation mode. Prenet dropout stays active,
/// driven by `seed` so repeated calls agree.
pub fn tte_eval_loss(model: &TteModel, pairs: &[TtePair], seed: u64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("no TTE evaluation pairs".into()));
    }
    let losses: Vec<f64> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let g = Graph::no_grad();
            let mut rng = seeded(seed, i as u64);
            let pred = model.decode_teacher_forced(&g, &p.tokens, &p.target, false, &mut rng)?;
            Ok(g.scalar(tte_loss(&g, &pred, &p.target)?))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// TTE pairs padded to common lengths. Tokens are padded with
/// [`crate::data::PAD`], targets with zero frames.
#[derive(Debug, Clone)]
pub struct TteBatch {
    pub dim: usize,
    pub max_tokens: usize,
    pub tokens: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
    pub max_frames: usize,
    /// `len x max_frames x dim`.
    pub targets: Vec<f64>,
    pub frame_mask: Vec<Vec<bool>>,
}

impl TteBatch {
    pub fn new(pairs: &[TtePair]) -> Result<Self> {
        let dim = pairs.first().map_or(0, |p| p.target.dim);
        if pairs.iter().any(|p| p.target.dim != dim) {
            return Err(Error::Input("TTE targets in a batch have different widths".into()));
        }
        let max_tokens = pairs.iter().map(|p| p.tokens.len()).max().unwrap_or(0);
        let max_frames = pairs.iter().map(|p| p.target.frames).max().unwrap_or(0);
        let mut batch = TteBatch {
            dim,
            max_tokens,
            tokens: Vec::new(),
            token_mask: Vec::new(),
            max_frames,
            targets: vec![0.0; pairs.len() * max_frames * dim],
            frame_mask: Vec::new(),
        };
        for (i, p) in pairs.iter().enumerate() {
            let mut row = vec![crate::data::PAD; max_tokens];
            row[..p.tokens.len()].copy_from_slice(&p.tokens);
            batch.tokens.push(row);
            batch.token_mask.push((0..max_tokens).map(|j| j < p.tokens.len()).collect());
            let start = i * max_frames * dim;
            batch.targets[start..start + p.target.states.len()].copy_from_slice(&p.target.states);
            batch.frame_mask.push((0..max_frames).map(|t| t < p.target.frames).collect());
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Entry `i` with the padding removed.
    pub fn pair(&self, i: usize) -> Result<TtePair> {
        let n = self.token_mask[i].iter().take_while(|&&m| m).count();
        let frames = self.frame_mask[i].iter().take_while(|&&m| m).count();
        let start = i * self.max_frames * self.dim;
        Ok(TtePair {
            tokens: self.tokens[i][..n].to_vec(),
            target: EncoderStates::new(frames, self.dim, self.targets[start..start + frames * self.dim].to_vec())?,
        })
    }
}

/// Sum of per-entry TTE losses over the unmasked part of `batch`. Entry `i`
/// draws its dropout masks from `seeded(seed, i)`.
pub fn batch_tte_loss(g: &Graph, model: &TteModel, batch: &TteBatch, train: bool, seed: u64) -> Result<crate::tensor::Var> {
    let mut total = g.zeros(1, 1)?;
    for i in 0..batch.len() {
        let p = batch.pair(i)?;
        let pred = model.decode_teacher_forced(g, &p.tokens, &p.target, train, &mut seeded(seed, i as u64))?;
        total = g.add(total, tte_loss(g, &pred, &p.target)?)?;
    }
    Ok(total)
}
