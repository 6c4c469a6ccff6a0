//! Tacotron2-style text-to-encoder model: predicts the ASR encoder state
//! sequence and per-frame end-of-sequence probabilities from characters.

mod train;

pub use train::{batch_tte_loss, tte_eval_loss, tte_train, TteBatch, TtePair, TteTrainConfig};

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asr::{check_targets, checkpoint_meta, EncoderStates};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::nn::{
    blstm_encode, dropout, zoneout, AttentionMode, BlstmLayer, Conv1d, Embedding, LayerNorm,
    Linear, LocationAttention, LstmParams, LstmState,
};
use crate::tensor::{Checkpoint, Graph, Module, Param, Var};
use crate::seeded;

/// Default end-of-sequence threshold for free-running generation.
pub const STOP_THRESHOLD: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TteConfig {
    /// Width of the ASR encoder states being predicted.
    pub target_dim: usize,
    pub embed_dim: usize,
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub conv_width: usize,
    /// Cells per direction of the encoder BLSTM.
    pub encoder_cells: usize,
    pub att_dim: usize,
    pub att_filters: usize,
    pub att_width: usize,
    pub prenet_layers: usize,
    pub prenet_dim: usize,
    pub decoder_layers: usize,
    pub decoder_cells: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_width: usize,
    /// Dropout on encoder and postnet convolutions (training only).
    pub dropout: f64,
    /// Prenet dropout, active in every mode.
    pub prenet_dropout: f64,
    /// Zoneout on the decoder LSTM states (training only).
    pub zoneout: f64,
}

impl Default for TteConfig {
    fn default() -> Self {
        TteConfig {
            target_dim: 32,
            embed_dim: 16,
            conv_layers: 3,
            conv_channels: 16,
            conv_width: 5,
            encoder_cells: 16,
            att_dim: 16,
            att_filters: 10,
            att_width: 5,
            prenet_layers: 2,
            prenet_dim: 16,
            decoder_layers: 1,
            decoder_cells: 32,
            postnet_layers: 3,
            postnet_channels: 16,
            postnet_width: 5,
            dropout: 0.5,
            prenet_dropout: 0.5,
            zoneout: 0.1,
        }
    }
}

impl TteConfig {
    /// Defaults sized for encoder states of width `target_dim`.
    pub fn default_with_dim(target_dim: usize) -> Self {
        TteConfig {
            target_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("target_dim", self.target_dim),
            ("embed_dim", self.embed_dim),
            ("conv_channels", self.conv_channels),
            ("encoder_cells", self.encoder_cells),
            ("att_dim", self.att_dim),
            ("att_filters", self.att_filters),
            ("prenet_dim", self.prenet_dim),
            ("decoder_layers", self.decoder_layers),
            ("decoder_cells", self.decoder_cells),
            ("postnet_layers", self.postnet_layers),
            ("postnet_channels", self.postnet_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("tte {name} must be positive")));
            }
        }
        for (name, r) in [("dropout", self.dropout), ("prenet_dropout", self.prenet_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("tte {name} must be in [0, 1), got {r}")));
            }
        }
        if !(0.0..=1.0).contains(&self.zoneout) {
            return Err(Error::Config(format!("tte zoneout must be in [0, 1], got {}", self.zoneout)));
        }
        Ok(())
    }
}

/// Predicted state sequence on a graph: `before` and `after` the postnet
/// (`T' x target_dim`) and stop probabilities (`T' x 1`).
#[derive(Debug, Clone, Copy)]
pub struct TtePrediction {
    pub before: Var,
    pub after: Var,
    pub stop: Var,
    pub frames: usize,
}

/// Output of free-running generation, as values.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeRun {
    pub frames: usize,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub stop: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv1d,
    pub norm: LayerNorm,
}

impl Module for ConvBlock {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}

#[derive(Debug, Clone)]
pub struct TteModel {
    pub config: TteConfig,
    pub vocab: Vocab,
    pub embed: Embedding,
    pub convs: Vec<ConvBlock>,
    pub blstm: BlstmLayer,
    pub attention: LocationAttention,
    pub prenet: Vec<Linear>,
    pub decoder: Vec<LstmParams>,
    pub project: Linear,
    pub stop: Linear,
    pub postnet: Vec<ConvBlock>,
}

struct DecoderStep {
    lstm: Vec<LstmState>,
    attention: crate::nn::AttentionState,
}

impl TteModel {
    pub fn new<R: Rng + ?Sized>(config: TteConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let embed = Embedding::new("tte.embed", vocab.size(), c.embed_dim, rng);
        let mut convs = Vec::new();
        let mut width = c.embed_dim;
        for i in 0..c.conv_layers {
            convs.push(ConvBlock {
                conv: Conv1d::new(&format!("tte.conv{i}"), width, c.conv_channels, c.conv_width, rng)?,
                norm: LayerNorm::new(&format!("tte.conv{i}.norm"), c.conv_channels),
            });
            width = c.conv_channels;
        }
        let blstm = BlstmLayer::new("tte.blstm", width, c.encoder_cells, false, rng);
        let enc_dim = 2 * c.encoder_cells;
        let attention = LocationAttention::new(
            "tte.att",
            c.decoder_cells,
            enc_dim,
            c.att_dim,
            c.att_filters,
            c.att_width,
            AttentionMode::Accumulated,
            rng,
        )?;
        let mut prenet = Vec::new();
        let mut width = c.target_dim;
        for i in 0..c.prenet_layers {
            prenet.push(Linear::new(&format!("tte.prenet{i}"), width, c.prenet_dim, rng));
            width = c.prenet_dim;
        }
        let decoder = (0..c.decoder_layers)
            .map(|i| {
                let input = if i == 0 { width + enc_dim } else { c.decoder_cells };
                LstmParams::new(&format!("tte.dec{i}"), input, c.decoder_cells, rng)
            })
            .collect();
        let project = Linear::new("tte.project", c.decoder_cells, c.target_dim, rng);
        let stop = Linear::new("tte.stop", c.decoder_cells, 1, rng);
        let mut postnet = Vec::new();
        let mut width = c.decoder_cells;
        for i in 0..c.postnet_layers {
            let out = if i + 1 == c.postnet_layers { c.target_dim } else { c.postnet_channels };
            postnet.push(ConvBlock {
                conv: Conv1d::new(&format!("tte.postnet{i}"), width, out, c.postnet_width, rng)?,
                norm: LayerNorm::new(&format!("tte.postnet{i}.norm"), out),
            });
            width = out;
        }
        Ok(TteModel {
            config,
            vocab,
            embed,
            convs,
            blstm,
            attention,
            prenet,
            decoder,
            project,
            stop,
            postnet,
        })
    }

    fn check_input(&self, tokens: &[usize]) -> Result<()> {
        check_targets(&self.vocab, tokens)
    }

    /// Encoder states `L x 2*cells`, one per input token (which must end in eos).
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        tokens: &[usize],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_input(tokens)?;
        let mut x = self.embed.forward(g, tokens)?;
        for block in &self.convs {
            let y = block.norm.forward(g, block.conv.forward(g, x)?)?;
            x = dropout(g, g.relu(y)?, self.config.dropout, rng, !train)?;
        }
        blstm_encode(g, x, std::slice::from_ref(&self.blstm))
    }

    fn prenet_forward<R: Rng + ?Sized>(&self, g: &Graph, x: Var, rng: &mut R) -> Result<Var> {
        let mut x = x;
        for layer in &self.prenet {
            x = dropout(g, g.relu(layer.forward(g, x)?)?, self.config.prenet_dropout, rng, false)?;
        }
        Ok(x)
    }

    fn start(&self, g: &Graph, keys: usize) -> Result<DecoderStep> {
        Ok(DecoderStep {
            lstm: (0..self.decoder.len())
                .map(|_| LstmState::zeros(g, self.config.decoder_cells))
                .collect::<Result<_>>()?,
            attention: self.attention.initial_state(g, keys)?,
        })
    }

    /// One decoder step from a prenet output row; returns the top decoder state.
    #[allow(clippy::too_many_arguments)]
    fn step<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        keys: Var,
        projected: Var,
        v: Var,
        state: DecoderStep,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, DecoderStep)> {
        let top = state.lstm.last().expect("at least one decoder layer").h;
        let (_, context, attention) = self.attention.attend(g, top, keys, projected, state.attention)?;
        let mut x = g.concat_cols(&[v, context])?;
        let mut lstm = Vec::with_capacity(self.decoder.len());
        for (cell, prev) in self.decoder.iter().zip(&state.lstm) {
            let new = cell.step(g, x, *prev)?;
            let z = self.config.zoneout;
            let next = LstmState {
                h: zoneout(g, new.h, prev.h, z, rng, !train)?,
                c: zoneout(g, new.c, prev.c, z, rng, !train)?,
            };
            x = next.h;
            lstm.push(next);
        }
        Ok((x, DecoderStep { lstm, attention }))
    }

    /// Projections, postnet and stop head over the stacked decoder states `q`.
    fn outputs<R: Rng + ?Sized>(&self, g: &Graph, q: Var, train: bool, rng: &mut R) -> Result<TtePrediction> {
        let z = self.project.forward(g, q)?;
        let mut d = q;
        let last = self.postnet.len() - 1;
        for (i, block) in self.postnet.iter().enumerate() {
            let y = block.conv.forward(g, d)?;
            d = if i == last {
                y
            } else {
                let y = g.tanh(block.norm.forward(g, y)?)?;
                dropout(g, y, self.config.dropout, rng, !train)?
            };
        }
        Ok(TtePrediction {
            before: g.tanh(z)?,
            after: g.tanh(g.add(z, d)?)?,
            stop: g.sigmoid(self.stop.forward(g, q)?)?,
            frames: g.shape(q).0,
        })
    }

    /// Teacher-forced prediction: the prenet reads the true previous encoder
    /// state (zeros before the first frame), so the output has exactly
    /// `target.frames` frames. `train` enables zoneout and convolution dropout;
    /// prenet dropout is always on.
    pub fn decode_teacher_forced<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        tokens: &[usize],
        target: &EncoderStates,
        train: bool,
        rng: &mut R,
    ) -> Result<TtePrediction> {
        if target.dim != self.config.target_dim {
            return Err(Error::shape(
                "tte_decode",
                format!("target dim {} for model predicting {}", target.dim, self.config.target_dim),
            ));
        }
        let keys = self.encode(g, tokens, train, rng)?;
        let projected = self.attention.project_keys(g, keys)?;
        let frames = target.frames;
        let dim = target.dim;
        let mut shifted = vec![0.0; frames * dim];
        shifted[dim..].copy_from_slice(&target.states[..(frames - 1) * dim]);
        let v = self.prenet_forward(g, g.constant(shifted, frames, dim)?, rng)?;
        let mut state = self.start(g, tokens.len())?;
        let mut rows = Vec::with_capacity(frames);
        for t in 0..frames {
            let (q, next) = self.step(g, keys, projected, g.slice_rows(v, t, 1)?, state, train, rng)?;
            rows.push(q);
            state = next;
        }
        let pred = self.outputs(g, g.concat_rows(&rows)?, train, rng)?;
        if pred.frames != frames {
            return Err(Error::Contract(format!(
                "teacher-forced decoder produced {} frames for a {frames}-frame target",
                pred.frames
            )));
        }
        Ok(pred)
    }

    /// Autoregressive generation: each step feeds back its own pre-postnet
    /// frame and stops once the stop probability exceeds `threshold` or after
    /// `max_frames` frames.
    pub fn free_run<R: Rng + ?Sized>(
        &self,
        tokens: &[usize],
        threshold: f64,
        max_frames: usize,
        rng: &mut R,
    ) -> Result<FreeRun> {
        if !(0.0 < threshold && threshold < 1.0) {
            return Err(Error::Config(format!("stop threshold must be in (0, 1), got {threshold}")));
        }
        if max_frames == 0 {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        let g = Graph::no_grad();
        let keys = self.encode(&g, tokens, false, rng)?;
        let projected = self.attention.project_keys(&g, keys)?;
        let mut state = self.start(&g, tokens.len())?;
        let mut prev = g.zeros(1, self.config.target_dim)?;
        let mut rows = Vec::new();
        for _ in 0..max_frames {
            let v = self.prenet_forward(&g, prev, rng)?;
            let (q, next) = self.step(&g, keys, projected, v, state, false, rng)?;
            state = next;
            rows.push(q);
            prev = g.tanh(self.project.forward(&g, q)?)?;
            let stop = g.scalar(g.sigmoid(self.stop.forward(&g, q)?)?);
            if stop > threshold {
                break;
            }
        }
        let pred = self.outputs(&g, g.concat_rows(&rows)?, false, rng)?;
        Ok(FreeRun {
            frames: pred.frames,
            before: g.value(pred.before),
            after: g.value(pred.after),
            stop: g.value(pred.stop),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "tte",
            "config": self.config,
            "vocab": self.vocab.chars().iter().collect::<String>(),
        });
        let mut ck = Checkpoint::new(meta.to_string());
        ck.add_module("", self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (config, vocab) = checkpoint_meta::<TteConfig>(ck, "tte")?;
        let mut model = TteModel::new(config, vocab, &mut seeded(0, 0))?;
        ck.load_module("", &mut model)?;
        Ok(model)
    }
}

/// `MSE(after) + MSE(before) + L1(after) + L1(before) + mean BCE(stop)`, with
/// MSE and L1 averaged over all elements.
pub fn tte_loss(g: &Graph, pred: &TtePrediction, target: &EncoderStates) -> Result<Var> {
    if pred.frames != target.frames {
        return Err(Error::Input(format!(
            "prediction has {} frames, target {}",
            pred.frames, target.frames
        )));
    }
    let h = target.to_var(g)?;
    let terms = [
        g.squared_error(pred.after, h)?,
        g.squared_error(pred.before, h)?,
        g.absolute_error(pred.after, h)?,
        g.absolute_error(pred.before, h)?,
        g.bce(pred.stop, &target.stop_labels)?,
    ];
    terms[1..].iter().try_fold(terms[0], |acc, &t| g.add(acc, t))
}

/// CSV of predicted against target states: `frame,dim,predicted,target`.
pub fn prediction_csv(predicted: &[f64], target: &EncoderStates) -> Result<String> {
    if predicted.len() != target.states.len() {
        return Err(Error::Input(format!(
            "{} predicted values for {} target values",
            predicted.len(),
            target.states.len()
        )));
    }
    let mut out = String::from("frame,dim,predicted,target\n");
    for t in 0..target.frames {
        for d in 0..target.dim {
            let i = t * target.dim + d;
            let _ = writeln!(out, "{t},{d},{},{}", predicted[i], target.states[i]);
        }
    }
    Ok(out)
}

impl Module for TteModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.embed.params();
        p.extend(self.convs.iter().flat_map(|c| c.params()));
        p.extend(self.blstm.params());
        p.extend(self.attention.params());
        p.extend(self.prenet.iter().flat_map(|l| l.params()));
        p.extend(self.decoder.iter().flat_map(|l| l.params()));
        p.extend(self.project.params());
        p.extend(self.stop.params());
        p.extend(self.postnet.iter().flat_map(|c| c.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.embed.params_mut();
        p.extend(self.convs.iter_mut().flat_map(|c| c.params_mut()));
        p.extend(self.blstm.params_mut());
        p.extend(self.attention.params_mut());
        p.extend(self.prenet.iter_mut().flat_map(|l| l.params_mut()));
        p.extend(self.decoder.iter_mut().flat_map(|l| l.params_mut()));
        p.extend(self.project.params_mut());
        p.extend(self.stop.params_mut());
        p.extend(self.postnet.iter_mut().flat_map(|c| c.params_mut()));
        p
    }
}

#[cfg(test)]
mod tests;
