use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::AsrModel;
use crate::data::{Batch, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::tensor::{accumulate, Adam, Graph, Var};
use crate::seeded;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 30,
            batch_size: 8,
            seed: 1,
        }
    }
}

/// Per-epoch training loss (mean per utterance) and validation accuracy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub val_acc: Vec<f64>,
}

/// Sum of per-utterance supervised losses over the real (unmasked) part of
/// every batch entry.
pub fn batch_supervised_loss(g: &Graph, model: &AsrModel, batch: &Batch) -> Result<Var> {
    let mut total = g.zeros(1, 1)?;
    for i in 0..batch.len() {
        let (Some(x), Some(tokens)) = (batch.features_of(i), batch.tokens_of(i)) else {
            return Err(Error::Input(format!("{} is not a paired utterance", batch.ids[i])));
        };
        total = g.add(total, model.supervised_loss(g, &x, &tokens)?)?;
    }
    Ok(total)
}

/// One optimizer step on the mean supervised loss of `utts` scaled by `weight`.
/// Returns the mean unweighted loss.
pub fn supervised_step(
    model: &mut AsrModel,
    opt: &mut Adam,
    utts: &[&Utterance],
    weight: f64,
) -> Result<f64> {
    let encoded: Vec<(&Utterance, Vec<usize>)> = utts
        .iter()
        .map(|u| Ok((*u, model.vocab.encode_with_eos(u.require_text()?)?)))
        .collect::<Result<_>>()?;
    let m = &*model;
    let (losses, mut grads) = accumulate(&encoded, |g, _, (u, tokens)| {
        let loss = m.supervised_loss(g, u.require_features()?, tokens)?;
        Ok(Some(loss))
    })?;
    grads.scale(weight / utts.len() as f64);
    opt.step(model, &grads);
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Fraction of target tokens (eos included) predicted correctly by argmax
/// given the true history.
pub fn teacher_forced_accuracy(model: &AsrModel, utts: &[Utterance]) -> Result<f64> {
    let counts: Vec<(usize, usize)> = utts
        .par_iter()
        .map(|u| {
            let tokens = model.vocab.encode_with_eos(u.require_text()?)?;
            let g = Graph::no_grad();
            let enc = model.prepare(&g, u.require_features()?)?;
            let logp = g.value(model.teacher_forced(&g, &enc, &tokens)?);
            let v = model.num_outputs();
            let correct = tokens
                .iter()
                .enumerate()
                .filter(|(l, &t)| {
                    let row = &logp[l * v..(l + 1) * v];
                    let mut best = 0;
                    for o in 1..v {
                        if row[o] > row[best] {
                            best = o;
                        }
                    }
                    best == Vocab::output_index(t)
                })
                .count();
            Ok((correct, tokens.len()))
        })
        .collect::<Result<_>>()?;
    let (c, n) = counts
        .iter()
        .fold((0, 0), |(c, n), (a, b)| (c + a, n + b));
    Ok(c as f64 / n.max(1) as f64)
}

/// Plain supervised training with shuffled minibatches; epoch `e` shuffles
/// with a stream derived from `(seed, e)`.
pub fn train_supervised(
    model: &mut AsrModel,
    opt: &mut Adam,
    train: &[Utterance],
    val: &[Utterance],
    cfg: &SupervisedConfig,
    first_epoch: usize,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut log = TrainLog::default();
    for epoch in first_epoch..cfg.epochs {
        let mut order: Vec<&Utterance> = train.iter().collect();
        order.shuffle(&mut seeded(cfg.seed, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            total += supervised_step(model, opt, chunk, 1.0)? * chunk.len() as f64;
        }
        log.losses.push(total / train.len() as f64);
        if !val.is_empty() {
            log.val_acc.push(teacher_forced_accuracy(model, val)?);
        }
        log::info!(
            "asr epoch {}: loss {:.4} val acc {:.4}",
            epoch + 1,
            log.losses.last().unwrap(),
            log.val_acc.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(log)
}
