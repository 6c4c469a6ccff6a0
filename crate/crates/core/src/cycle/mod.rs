//! Cycle-consistency training of the ASR model against a frozen TTE model.
//!
//! Hypotheses sampled from the ASR decoder are turned back into encoder
//! states by the TTE model; the reconstruction error of each hypothesis is a
//! constant REINFORCE weight on its log-probability.

mod train;

pub use train::{evaluate_validation, train_alternating, Mode, ScheduleConfig, TrainOutcome};

use rand::Rng;
use rayon::prelude::*;

use crate::asr::{beam_search, sample_sequences, AsrModel, BeamConfig, EncoderStates};
use crate::data::{FeatureSequence, EOS};
use crate::error::{Error, Result};
use crate::seeded;
use crate::tensor::{Gradients, Graph, Var};
use crate::tte::{tte_loss, TteModel};

/// How the per-sample baseline is formed from the other samples' losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineKind {
    /// Mean of the other `N - 1` losses; keeps the estimator unbiased.
    #[default]
    LeaveOneOut,
    /// Mean of all `N` losses, the sample itself included.
    BatchMean,
}

/// Leave-one-out baselines: entry `n` is the mean of every loss except the
/// `n`-th, and 0 for a single loss.
pub fn baseline_value(losses: &[f64]) -> Result<Vec<f64>> {
    let n = losses.len();
    if n == 0 {
        return Err(Error::Input("baseline of an empty loss list".into()));
    }
    if n == 1 {
        return Ok(vec![0.0]);
    }
    let total: f64 = losses.iter().sum();
    Ok(losses.iter().map(|l| (total - l) / (n - 1) as f64).collect())
}

pub fn batch_mean_baseline(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::Input("baseline of an empty loss list".into()));
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(vec![mean; losses.len()])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleConfig {
    /// Hypotheses drawn per utterance.
    pub samples: usize,
    pub temperature: f64,
    /// Sampled hypotheses are cut at `max_ratio * T'` characters.
    pub max_ratio: f64,
    pub baseline: BaselineKind,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig {
            samples: 5,
            temperature: 1.0,
            max_ratio: 0.8,
            baseline: BaselineKind::LeaveOneOut,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::Config("cycle needs at least one sample per utterance".into()));
        }
        if !(self.temperature > 0.0) || !(self.max_ratio > 0.0) {
            return Err(Error::Config("temperature and max ratio must be positive".into()));
        }
        Ok(())
    }
}

/// One utterance's contribution to the cycle gradient.
#[derive(Debug, Clone)]
pub struct CycleBatchResult {
    /// Sampled token sequences, eos-terminated.
    pub samples: Vec<Vec<usize>>,
    /// Whether each sample was cut at the length limit; its final eos was
    /// appended without being scored.
    pub truncated: Vec<bool>,
    /// Reconstruction loss of each sample against the ASR encoder states.
    pub losses: Vec<f64>,
    pub baselines: Vec<f64>,
    /// `losses - baselines`, used as constants.
    pub weights: Vec<f64>,
    /// Value of the surrogate `(1/N) sum_n w_n log p(C^n | X)`.
    pub estimator: f64,
    /// Gradient of the surrogate with respect to the ASR parameters.
    pub grads: Gradients,
}

impl CycleBatchResult {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Reconstruction loss of `tokens` against `target` with the TTE in eval
/// mode. Prenet dropout stays on and is driven by `seed`.
pub fn reconstruction_loss(tte: &TteModel, tokens: &[usize], target: &EncoderStates, seed: u64) -> Result<f64> {
    let g = Graph::no_grad();
    let pred = tte.decode_teacher_forced(&g, tokens, target, false, &mut seeded(seed, 0))?;
    Ok(g.scalar(tte_loss(&g, &pred, target)?))
}

/// Builds the REINFORCE surrogate for one utterance on `g`.
///
/// The encoder runs once; its output is differentiable for the sampler and
/// copied out as a constant target for the TTE. Every sample is scored with
/// the same prenet dropout masks so that the weights compare hypotheses, not
/// dropout draws.
pub fn cycle_surrogate<R: Rng + ?Sized>(
    g: &Graph,
    x: &FeatureSequence,
    asr: &AsrModel,
    tte: &TteModel,
    cfg: &CycleConfig,
    rng: &mut R,
) -> Result<(Var, CycleBatchResult)> {
    cfg.validate()?;
    let keys = asr.encode_var(g, x)?;
    let (frames, dim) = g.shape(keys);
    let target = EncoderStates::new(frames, dim, g.value(keys))?;
    let enc = asr.prepare_keys(g, keys)?;
    let samples = sample_sequences(asr, g, &enc, cfg.samples, cfg.temperature, cfg.max_ratio, rng)?;
    let tte_seed: u64 = rng.random();
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| reconstruction_loss(tte, &s.tokens, &target, tte_seed))
        .collect::<Result<_>>()?;
    let baselines = if losses.len() == 1 {
        // Nothing to compare a lone sample with: its own loss is the baseline.
        losses.clone()
    } else {
        match cfg.baseline {
            BaselineKind::LeaveOneOut => baseline_value(&losses)?,
            BaselineKind::BatchMean => batch_mean_baseline(&losses)?,
        }
    };
    let weights: Vec<f64> = losses.iter().zip(&baselines).map(|(l, b)| l - b).collect();
    let n = samples.len() as f64;
    let mut surrogate = g.zeros(1, 1)?;
    for (s, w) in samples.iter().zip(&weights) {
        surrogate = g.add(surrogate, g.scale(s.log_prob, w / n)?)?;
    }
    let result = CycleBatchResult {
        truncated: samples.iter().map(|s| s.truncated).collect(),
        samples: samples.into_iter().map(|s| s.tokens).collect(),
        losses,
        baselines,
        weights,
        estimator: g.scalar(surrogate),
        grads: Gradients::default(),
    };
    Ok((surrogate, result))
}

/// One REINFORCE estimate for utterance `x`. The TTE model is only read.
pub fn cycle_step<R: Rng + ?Sized>(
    x: &FeatureSequence,
    asr: &AsrModel,
    tte: &TteModel,
    cfg: &CycleConfig,
    rng: &mut R,
) -> Result<CycleBatchResult> {
    let g = Graph::new();
    let (surrogate, mut result) = cycle_surrogate(&g, x, asr, tte, cfg, rng)?;
    result.grads = g.backward(surrogate)?;
    Ok(result)
}

/// Where pseudo-labels for unpaired audio come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PseudoLabel {
    /// Top beam-search hypothesis.
    OneBest(BeamConfig),
    /// `k` ancestral samples.
    Sampled { k: usize, temperature: f64, max_ratio: f64 },
}

/// `weight` times the mean cross-entropy of the ASR model on its own
/// pseudo-labels for `x`. Empty hypotheses are dropped; returns `None` when
/// none are left.
pub fn pseudo_label_ce_step<R: Rng + ?Sized>(
    g: &Graph,
    x: &FeatureSequence,
    asr: &AsrModel,
    mode: &PseudoLabel,
    weight: f64,
    rng: &mut R,
) -> Result<Option<Var>> {
    let labels: Vec<Vec<usize>> = match mode {
        PseudoLabel::OneBest(cfg) => beam_search(asr, x, cfg, None)?
            .into_iter()
            .take(1)
            .map(|h| h.tokens)
            .collect(),
        PseudoLabel::Sampled { k, temperature, max_ratio } => {
            let ng = Graph::no_grad();
            let enc = asr.prepare(&ng, x)?;
            sample_sequences(asr, &ng, &enc, *k, *temperature, *max_ratio, rng)?
                .into_iter()
                .map(|s| s.tokens)
                .collect()
        }
    };
    let labels: Vec<&Vec<usize>> = labels.iter().filter(|t| t.as_slice() != [EOS]).collect();
    if labels.is_empty() {
        log::warn!("empty pseudo-label, utterance skipped");
        return Ok(None);
    }
    let enc = asr.prepare(g, x)?;
    let mut total = g.zeros(1, 1)?;
    for tokens in &labels {
        total = g.add(total, asr.supervised_loss_encoded(g, &enc, tokens)?)?;
    }
    Ok(Some(g.scale(total, weight / labels.len() as f64)?))
}

#[cfg(test)]
mod tests;
