use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{cycle_step, pseudo_label_ce_step, CycleConfig, PseudoLabel};
use crate::asr::{decode_corpus, supervised_step, teacher_forced_accuracy, AsrModel, BeamConfig};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::eval::{score_corpus, EpochMetrics, MetricsLog};
use crate::seeded;
use crate::tensor::{accumulate, Adam, Gradients};
use crate::tte::TteModel;

const CYCLE_SALT: u64 = 0x6379_636c_65;
const CE_SALT: u64 = 0x7073_6575_646f;

/// What the unpaired half of the schedule does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// REINFORCE reconstruction loss through the frozen TTE.
    Cycle,
    /// Cross-entropy on the top beam hypothesis.
    Ce1Best,
    /// Cross-entropy on sampled hypotheses.
    CeSampled,
    /// Cross-entropy on the true transcripts of the "unpaired" set.
    Oracle,
    /// Unpaired data is ignored.
    Supervised,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycle" => Ok(Mode::Cycle),
            "ce1" | "ce_1best" => Ok(Mode::Ce1Best),
            "ce5" | "ce_ksample" => Ok(Mode::CeSampled),
            "oracle" => Ok(Mode::Oracle),
            "supervised" => Ok(Mode::Supervised),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected cycle, ce1, ce5, oracle or supervised)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Cycle => "cycle",
            Mode::Ce1Best => "ce1",
            Mode::CeSampled => "ce5",
            Mode::Oracle => "oracle",
            Mode::Supervised => "supervised",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// Consecutive paired batches before switching to unpaired data.
    pub paired_steps: usize,
    /// Consecutive unpaired batches before switching back.
    pub unpaired_steps: usize,
    pub paired_batch: usize,
    pub unpaired_batch: usize,
    pub paired_lr: f64,
    pub unpaired_lr: f64,
    pub cycle: CycleConfig,
    /// Weight of the pseudo-label cross-entropy.
    pub ce_weight: f64,
    /// Hypotheses per utterance for sampled pseudo-labels.
    pub ce_samples: usize,
    /// Beam settings for one-best pseudo-labels.
    pub label_beam: BeamConfig,
    /// Beam settings for validation CER/WER.
    pub val_beam: BeamConfig,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 10,
            paired_steps: 1,
            unpaired_steps: 1,
            paired_batch: 8,
            unpaired_batch: 8,
            paired_lr: 1e-3,
            unpaired_lr: 1e-3,
            cycle: CycleConfig::default(),
            ce_weight: 0.1,
            ce_samples: 5,
            label_beam: BeamConfig::default(),
            val_beam: BeamConfig {
                beam: 4,
                ..BeamConfig::default()
            },
            seed: 1,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paired_steps < 1 || self.unpaired_steps < 1 {
            return Err(Error::Config("schedule ratio components must be at least 1".into()));
        }
        if self.paired_batch < 1 || self.unpaired_batch < 1 || self.ce_samples < 1 {
            return Err(Error::Config("batch sizes and sample counts must be at least 1".into()));
        }
        self.cycle.validate()?;
        self.label_beam.validate()?;
        self.val_beam.validate()
    }
}

/// Best model by validation accuracy and the per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AsrModel,
    /// 1-based epoch the returned model comes from.
    pub best_epoch: usize,
    pub log: MetricsLog,
}

/// Teacher-forced accuracy, CER and WER on `val`. NaN when `val` is empty.
pub fn evaluate_validation(model: &AsrModel, val: &[Utterance], beam: &BeamConfig) -> Result<(f64, f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let acc = teacher_forced_accuracy(model, val)?;
    let hyps: BTreeMap<String, String> = decode_corpus(model, val, beam, None)?
        .into_iter()
        .map(|(id, h)| {
            let text = h.text(&model.vocab);
            (id, text)
        })
        .collect();
    let refs = val
        .iter()
        .map(|u| Ok((u.id.clone(), u.require_text()?.to_string())))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let report = score_corpus(&hyps, &refs)?;
    Ok((acc, report.cer(), report.wer()))
}

fn stream(epoch: usize, index: usize) -> u64 {
    ((epoch as u64) << 32) | index as u64
}

/// Cycle gradient for a batch of unpaired utterances; returns the mean
/// reconstruction loss and the summed gradient.
fn cycle_batch(
    asr: &AsrModel,
    tte: &TteModel,
    batch: &[(usize, &Utterance)],
    cfg: &ScheduleConfig,
    epoch: usize,
) -> Result<(f64, Gradients)> {
    let results = batch
        .par_iter()
        .map(|(i, u)| {
            let mut rng = seeded(cfg.seed ^ CYCLE_SALT, stream(epoch, *i));
            cycle_step(u.require_features()?, asr, tte, &cfg.cycle, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Gradients::default();
    let mut loss = 0.0;
    for r in results {
        loss += r.mean_loss();
        grads.merge(r.grads);
    }
    Ok((loss / batch.len() as f64, grads))
}

/// Alternates supervised steps on `paired` with mode-specific steps on
/// `unpaired`. An epoch is one pass over the unpaired set (or over the paired
/// set when there is no unpaired step). The TTE model is never modified.
#[allow(clippy::too_many_arguments)]
pub fn train_alternating(
    mut asr: AsrModel,
    tte: Option<&TteModel>,
    opt: &mut Adam,
    paired: &[Utterance],
    unpaired: &[Utterance],
    val: &[Utterance],
    mode: Mode,
    cfg: &ScheduleConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if paired.is_empty() {
        return Err(Error::Input("alternating training needs paired data".into()));
    }
    if mode == Mode::Cycle && tte.is_none() {
        return Err(Error::Config("cycle mode needs a pre-trained TTE model".into()));
    }
    if let Some(tte) = tte {
        if tte.config.target_dim != asr.encoder_dim() {
            return Err(Error::Config(format!(
                "TTE predicts {}-dim states, ASR encoder produces {}",
                tte.config.target_dim,
                asr.encoder_dim()
            )));
        }
    }
    let use_unpaired = mode != Mode::Supervised && !unpaired.is_empty();
    let mut log = MetricsLog::default();
    let mut best: Option<(f64, usize, AsrModel)> = None;
    for epoch in 0..cfg.epochs {
        let mut p_order: Vec<&Utterance> = paired.iter().collect();
        p_order.shuffle(&mut seeded(cfg.seed, stream(epoch, 0)));
        let mut u_order: Vec<(usize, &Utterance)> = unpaired.iter().enumerate().collect();
        u_order.shuffle(&mut seeded(cfg.seed, stream(epoch, 1)));
        let p_batches: Vec<&[&Utterance]> = p_order.chunks(cfg.paired_batch).collect();
        let u_batches: Vec<&[(usize, &Utterance)]> = u_order.chunks(cfg.unpaired_batch).collect();

        let mut cycle_total = 0.0;
        let mut cycle_count = 0usize;
        let mut next_paired = 0usize;
        let mut paired_round = |asr: &mut AsrModel, opt: &mut Adam| -> Result<()> {
            opt.lr = cfg.paired_lr;
            for _ in 0..cfg.paired_steps {
                supervised_step(asr, opt, p_batches[next_paired % p_batches.len()], 1.0)?;
                next_paired += 1;
            }
            Ok(())
        };
        if !use_unpaired {
            for _ in 0..p_batches.len().div_ceil(cfg.paired_steps) {
                paired_round(&mut asr, opt)?;
            }
        } else {
            for group in u_batches.chunks(cfg.unpaired_steps) {
                paired_round(&mut asr, opt)?;
                opt.lr = cfg.unpaired_lr;
                for batch in group {
                    let mut grads = match mode {
                        Mode::Cycle => {
                            let (loss, grads) = cycle_batch(&asr, tte.expect("checked above"), batch, cfg, epoch)?;
                            cycle_total += loss * batch.len() as f64;
                            cycle_count += batch.len();
                            grads
                        }
                        Mode::Ce1Best | Mode::CeSampled => {
                            let label = if mode == Mode::Ce1Best {
                                PseudoLabel::OneBest(cfg.label_beam)
                            } else {
                                PseudoLabel::Sampled {
                                    k: cfg.ce_samples,
                                    temperature: cfg.cycle.temperature,
                                    max_ratio: cfg.cycle.max_ratio,
                                }
                            };
                            let m = &asr;
                            accumulate(batch, |g, _, (i, u)| {
                                let mut rng = seeded(cfg.seed ^ CE_SALT, stream(epoch, *i));
                                pseudo_label_ce_step(g, u.require_features()?, m, &label, cfg.ce_weight, &mut rng)
                            })?
                            .1
                        }
                        Mode::Oracle => {
                            let m = &asr;
                            accumulate(batch, |g, _, (_, u)| {
                                let tokens = m.vocab.encode_with_eos(u.require_text()?)?;
                                Ok(Some(m.supervised_loss(g, u.require_features()?, &tokens)?))
                            })?
                            .1
                        }
                        Mode::Supervised => unreachable!("no unpaired steps in supervised mode"),
                    };
                    grads.scale(1.0 / batch.len() as f64);
                    opt.step(&mut asr, &grads);
                }
            }
        }

        let (val_acc, val_cer, val_wer) = evaluate_validation(&asr, val, &cfg.val_beam)?;
        let cycle_loss = if cycle_count > 0 {
            cycle_total / cycle_count as f64
        } else {
            f64::NAN
        };
        log::info!(
            "{mode} epoch {}: cycle loss {cycle_loss:.4} val acc {val_acc:.4} cer {val_cer:.4} wer {val_wer:.4}",
            epoch + 1
        );
        log.push(EpochMetrics {
            epoch: epoch + 1,
            cycle_loss,
            val_acc,
            val_cer,
            val_wer,
        });
        // Without validation data the last epoch wins.
        let score = if val_acc.is_nan() { epoch as f64 } else { val_acc };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch + 1, asr.clone()));
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (asr, 0),
    };
    Ok(TrainOutcome { model, best_epoch, log })
}
