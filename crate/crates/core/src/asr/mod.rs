//! Attention encoder-decoder speech recognizer.

mod search;
mod train;

pub use search::{
    beam_search, decode_corpus, greedy_decode, sample_sequences, BeamConfig, Fusion, Hypothesis,
    LmScorer, Sample,
};
pub use train::{
    batch_supervised_loss, supervised_step, teacher_forced_accuracy, train_supervised,
    SupervisedConfig, TrainLog,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::data::Vocab;
use crate::data::{FeatureSequence, EOS, SOS};
use crate::error::{Error, Result};
use crate::nn::{
    blstm_encode, subsampled_len, AttentionMode, AttentionState, BlstmLayer, Embedding, Linear,
    LocationAttention, LstmParams, LstmState,
};
use crate::tensor::{Checkpoint, Graph, Module, Param, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrConfig {
    pub feature_dim: usize,
    pub encoder_layers: usize,
    /// The first this-many encoder layers keep every second frame.
    pub subsample_layers: usize,
    /// Cells per direction.
    pub encoder_cells: usize,
    pub embed_dim: usize,
    pub decoder_cells: usize,
    pub att_dim: usize,
    pub att_filters: usize,
    pub att_width: usize,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig {
            feature_dim: 8,
            encoder_layers: 2,
            subsample_layers: 2,
            encoder_cells: 16,
            embed_dim: 16,
            decoder_cells: 32,
            att_dim: 16,
            att_filters: 10,
            att_width: 5,
        }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers == 0 || self.subsample_layers > self.encoder_layers {
            return Err(Error::Config(
                "need at least one encoder layer and no more subsampling layers than layers".into(),
            ));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("encoder_cells", self.encoder_cells),
            ("embed_dim", self.embed_dim),
            ("decoder_cells", self.decoder_cells),
            ("att_dim", self.att_dim),
            ("att_filters", self.att_filters),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Encoder output as plain values, with end-of-sequence labels (1 on the last frame).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub frames: usize,
    pub dim: usize,
    pub states: Vec<f64>,
    pub stop_labels: Vec<f64>,
}

impl EncoderStates {
    pub fn new(frames: usize, dim: usize, states: Vec<f64>) -> Result<Self> {
        if frames == 0 || states.len() != frames * dim {
            return Err(Error::Input(format!(
                "{} state values for {frames} frames of dim {dim}",
                states.len()
            )));
        }
        let mut stop_labels = vec![0.0; frames];
        stop_labels[frames - 1] = 1.0;
        Ok(EncoderStates {
            frames,
            dim,
            states,
            stop_labels,
        })
    }

    pub fn to_var(&self, g: &Graph) -> Result<Var> {
        g.constant(self.states.clone(), self.frames, self.dim)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.states[t * self.dim..(t + 1) * self.dim]
    }
}

/// Decoder recurrence state carried between output steps.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub lstm: LstmState,
    pub attention: AttentionState,
}

/// Encoder outputs of one utterance on a graph, with their attention projection.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub keys: Var,
    pub projected: Var,
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct AsrModel {
    pub config: AsrConfig,
    pub vocab: Vocab,
    pub encoder: Vec<BlstmLayer>,
    pub embed: Embedding,
    pub decoder: LstmParams,
    pub attention: LocationAttention,
    pub output: Linear,
}

impl AsrModel {
    pub fn new<R: Rng + ?Sized>(config: AsrConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        let mut input = config.feature_dim;
        for i in 0..config.encoder_layers {
            let layer = BlstmLayer::new(
                &format!("asr.enc{i}"),
                input,
                config.encoder_cells,
                i < config.subsample_layers,
                rng,
            );
            input = layer.output_dim();
            encoder.push(layer);
        }
        let enc_dim = 2 * config.encoder_cells;
        let embed = Embedding::new("asr.embed", vocab.size(), config.embed_dim, rng);
        let decoder = LstmParams::new("asr.dec", enc_dim + config.embed_dim, config.decoder_cells, rng);
        let attention = LocationAttention::new(
            "asr.att",
            config.decoder_cells,
            enc_dim,
            config.att_dim,
            config.att_filters,
            config.att_width,
            AttentionMode::Plain,
            rng,
        )?;
        let output = Linear::new("asr.out", config.decoder_cells, vocab.num_outputs(), rng);
        Ok(AsrModel {
            config,
            vocab,
            encoder,
            embed,
            decoder,
            attention,
            output,
        })
    }

    pub fn encoder_dim(&self) -> usize {
        2 * self.config.encoder_cells
    }

    pub fn num_outputs(&self) -> usize {
        self.vocab.num_outputs()
    }

    pub fn min_frames(&self) -> usize {
        1 << self.config.subsample_layers
    }

    pub fn encoded_len(&self, frames: usize) -> usize {
        subsampled_len(frames, &self.encoder)
    }

    /// Differentiable encoder output `T' x 2*cells`.
    pub fn encode_var(&self, g: &Graph, x: &FeatureSequence) -> Result<Var> {
        if x.dim() != self.config.feature_dim {
            return Err(Error::shape(
                "encode",
                format!("feature dim {} for model expecting {}", x.dim(), self.config.feature_dim),
            ));
        }
        blstm_encode(g, x.to_var(g)?, &self.encoder)
    }

    /// Encoder states as values.
    pub fn encode(&self, x: &FeatureSequence) -> Result<EncoderStates> {
        let g = Graph::no_grad();
        let h = self.encode_var(&g, x)?;
        let (frames, dim) = g.shape(h);
        EncoderStates::new(frames, dim, g.value(h))
    }

    /// Runs the encoder and prepares the attention keys.
    pub fn prepare(&self, g: &Graph, x: &FeatureSequence) -> Result<Encoded> {
        let keys = self.encode_var(g, x)?;
        self.prepare_keys(g, keys)
    }

    pub fn prepare_keys(&self, g: &Graph, keys: Var) -> Result<Encoded> {
        Ok(Encoded {
            keys,
            projected: self.attention.project_keys(g, keys)?,
            frames: g.shape(keys).0,
        })
    }

    pub fn initial_state(&self, g: &Graph, enc: &Encoded) -> Result<DecoderState> {
        Ok(DecoderState {
            lstm: LstmState::zeros(g, self.config.decoder_cells)?,
            attention: self.attention.initial_state(g, enc.frames)?,
        })
    }

    /// Output logits `1 x (|U| + 1)` for the next token after `prev`.
    pub fn step_logits(
        &self,
        g: &Graph,
        enc: &Encoded,
        prev: usize,
        state: DecoderState,
    ) -> Result<(Var, DecoderState)> {
        self.vocab.check_token(prev)?;
        let (_, context, attention) =
            self.attention
                .attend(g, state.lstm.h, enc.keys, enc.projected, state.attention)?;
        let emb = self.embed.forward(g, &[prev])?;
        let input = g.concat_cols(&[context, emb])?;
        let lstm = self.decoder.step(g, input, state.lstm)?;
        let logits = self.output.forward(g, lstm.h)?;
        Ok((logits, DecoderState { lstm, attention }))
    }

    /// Log-distribution over eos and the characters for the token after `prev`.
    /// Output index `o` is token `o + 2` (see [`Vocab::output_token`]).
    pub fn decode_step(
        &self,
        g: &Graph,
        enc: &Encoded,
        prev: usize,
        state: DecoderState,
    ) -> Result<(Var, DecoderState)> {
        let (logits, next) = self.step_logits(g, enc, prev, state)?;
        Ok((g.log_softmax(logits)?, next))
    }

    /// Teacher-forced log-distributions, one row per target token.
    pub fn teacher_forced(&self, g: &Graph, enc: &Encoded, targets: &[usize]) -> Result<Var> {
        let mut state = self.initial_state(g, enc)?;
        let mut prev = SOS;
        let mut rows = Vec::with_capacity(targets.len());
        for &t in targets {
            let (logp, next) = self.decode_step(g, enc, prev, state)?;
            rows.push(logp);
            state = next;
            prev = t;
        }
        g.concat_rows(&rows)
    }

    /// `-sum_l log p(c_l | c_<l, X)` with the true history; `targets` must end in eos.
    pub fn supervised_loss(&self, g: &Graph, x: &FeatureSequence, targets: &[usize]) -> Result<Var> {
        let enc = self.prepare(g, x)?;
        self.supervised_loss_encoded(g, &enc, targets)
    }

    pub fn supervised_loss_encoded(&self, g: &Graph, enc: &Encoded, targets: &[usize]) -> Result<Var> {
        check_targets(&self.vocab, targets)?;
        let logp = self.teacher_forced(g, enc, targets)?;
        let out: Vec<usize> = targets.iter().map(|&t| Vocab::output_index(t)).collect();
        let picked = g.gather(logp, &out)?;
        g.scale(g.sum(picked)?, -1.0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "asr",
            "config": self.config,
            "vocab": self.vocab.chars().iter().collect::<String>(),
        });
        let mut ck = Checkpoint::new(meta.to_string());
        ck.add_module("", self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (config, vocab) = checkpoint_meta::<AsrConfig>(ck, "asr")?;
        let mut model = AsrModel::new(config, vocab, &mut crate::seeded(0, 0))?;
        ck.load_module("", &mut model)?;
        Ok(model)
    }
}

/// Reads `(config, vocab)` from checkpoint metadata written by a model of `kind`.
pub(crate) fn checkpoint_meta<C: serde::de::DeserializeOwned>(
    ck: &Checkpoint,
    kind: &str,
) -> Result<(C, Vocab)> {
    let bad = |m: String| Error::Checkpoint(m);
    let meta: serde_json::Value =
        serde_json::from_str(&ck.meta).map_err(|e| bad(format!("metadata: {e}")))?;
    if meta["kind"] != kind {
        return Err(bad(format!("expected a {kind} checkpoint, found {}", meta["kind"])));
    }
    let config = serde_json::from_value(meta["config"].clone()).map_err(|e| bad(format!("config: {e}")))?;
    let chars = meta["vocab"]
        .as_str()
        .ok_or_else(|| bad("missing vocabulary".into()))?;
    Ok((config, Vocab::new(chars.chars())?))
}

pub(crate) fn check_targets(vocab: &Vocab, targets: &[usize]) -> Result<()> {
    match targets.last() {
        None => Err(Error::Input("empty transcript".into())),
        Some(&t) if t != EOS => Err(Error::Input("transcript must end with eos".into())),
        _ => {
            for (i, &t) in targets.iter().enumerate() {
                vocab.check_token(t)?;
                if t < EOS || (t == EOS && i + 1 != targets.len()) {
                    return Err(Error::Input(format!("token {t} at position {i} is not a target")));
                }
            }
            Ok(())
        }
    }
}

impl Module for AsrModel {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.encoder.iter().flat_map(|l| l.params()).collect();
        p.extend(self.embed.params());
        p.extend(self.decoder.params());
        p.extend(self.attention.params());
        p.extend(self.output.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.encoder.iter_mut().flat_map(|l| l.params_mut()).collect();
        p.extend(self.embed.params_mut());
        p.extend(self.decoder.params_mut());
        p.extend(self.attention.params_mut());
        p.extend(self.output.params_mut());
        p
    }
}
