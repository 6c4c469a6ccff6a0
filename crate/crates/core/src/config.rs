//! Run configuration: every tunable of the pipeline with its default, read
//! from flat `key = value` files and `--set key=value` overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::asr::{AsrConfig, BeamConfig, SupervisedConfig};
use crate::cycle::{BaselineKind, CycleConfig, ScheduleConfig};
use crate::data::{CorpusSizes, SynthSpec};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmTrainConfig};
use crate::tte::{TteConfig, TteTrainConfig, STOP_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub sup_epochs: usize,
    pub sup_batch: usize,
    pub sup_lr: f64,
    pub tte_epochs: usize,
    pub tte_batch: usize,
    pub tte_lr: f64,
    pub lm_epochs: usize,
    pub lm_batch: usize,
    pub lm_lr: f64,
    pub cycle_epochs: usize,
    pub paired_steps: usize,
    pub unpaired_steps: usize,
    pub paired_batch: usize,
    pub unpaired_batch: usize,
    pub paired_lr: f64,
    pub unpaired_lr: f64,
    pub samples: usize,
    pub temperature: f64,
    /// `loo` (leave-one-out) or `mean` (in-batch mean).
    pub baseline: String,
    pub ce_weight: f64,
    pub ce_samples: usize,
    pub val_beam: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            sup_epochs: 60,
            sup_batch: 8,
            sup_lr: 1e-2,
            tte_epochs: 100,
            tte_batch: 8,
            tte_lr: 3e-3,
            lm_epochs: 20,
            lm_batch: 16,
            lm_lr: 1e-3,
            cycle_epochs: 10,
            paired_steps: 1,
            unpaired_steps: 1,
            paired_batch: 8,
            unpaired_batch: 8,
            paired_lr: 1e-3,
            unpaired_lr: 1e-3,
            samples: 5,
            temperature: 1.0,
            baseline: "loo".into(),
            ce_weight: 0.1,
            ce_samples: 5,
            val_beam: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    pub beam: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub lm_weight: f64,
    pub stop_threshold: f64,
    pub max_frames: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        let beam = BeamConfig::default();
        DecodeSettings {
            beam: beam.beam,
            min_ratio: beam.min_ratio,
            max_ratio: beam.max_ratio,
            lm_weight: 0.3,
            stop_threshold: STOP_THRESHOLD,
            max_frames: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub sizes: CorpusSizes,
    pub words_min: usize,
    pub words_max: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            sizes: CorpusSizes::default(),
            words_min: 2,
            words_max: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub data: DataSettings,
    pub asr: AsrConfig,
    pub tte: TteConfig,
    pub lm: LmConfig,
    pub train: TrainSettings,
    pub decode: DecodeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let asr = AsrConfig::default();
        RunConfig {
            seed: 1,
            synth: SynthSpec::default(),
            data: DataSettings::default(),
            tte: TteConfig::default_with_dim(2 * asr.encoder_cells),
            asr,
            lm: LmConfig::default(),
            train: TrainSettings::default(),
            decode: DecodeSettings::default(),
        }
    }
}

/// One-line description of every key, in file order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "master seed for data generation, initialization and training"),
    ("synth.letters", "letters in the synthetic alphabet (space is added)"),
    ("synth.dim", "feature dimension"),
    ("synth.dur_min", "minimum frames per character"),
    ("synth.dur_max", "maximum frames per character"),
    ("synth.noise", "per-frame Gaussian noise std"),
    ("synth.speaker_offset", "per-utterance speaker offset std"),
    ("synth.scale_min", "lower bound of the speaker scale"),
    ("synth.scale_max", "upper bound of the speaker scale"),
    ("synth.lexicon_size", "words in the synthetic lexicon"),
    ("synth.word_min", "minimum letters per word"),
    ("synth.word_max", "maximum letters per word"),
    ("synth.successors", "allowed next words per word"),
    ("synth.world_seed", "seed for prototypes and lexicon"),
    ("data.sizes.paired", "paired training utterances"),
    ("data.sizes.unpaired", "audio-only training utterances"),
    ("data.sizes.text", "text-only sentences for the LM"),
    ("data.sizes.val", "validation utterances"),
    ("data.sizes.eval", "evaluation utterances"),
    ("data.words_min", "minimum words per utterance"),
    ("data.words_max", "maximum words per utterance"),
    ("asr.feature_dim", "input feature dimension (must match synth.dim)"),
    ("asr.encoder_layers", "BLSTM encoder layers"),
    ("asr.subsample_layers", "leading encoder layers that halve the frame rate"),
    ("asr.encoder_cells", "encoder cells per direction"),
    ("asr.embed_dim", "decoder character embedding size"),
    ("asr.decoder_cells", "decoder LSTM cells"),
    ("asr.att_dim", "attention inner dimension"),
    ("asr.att_filters", "location filters"),
    ("asr.att_width", "location filter width (odd)"),
    ("tte.target_dim", "predicted state width; follows 2 * asr.encoder_cells unless set"),
    ("tte.embed_dim", "TTE character embedding size"),
    ("tte.conv_layers", "encoder convolution layers"),
    ("tte.conv_channels", "encoder convolution channels"),
    ("tte.conv_width", "encoder convolution width (odd)"),
    ("tte.encoder_cells", "TTE encoder BLSTM cells per direction"),
    ("tte.att_dim", "TTE attention inner dimension"),
    ("tte.att_filters", "TTE location filters"),
    ("tte.att_width", "TTE location filter width (odd)"),
    ("tte.prenet_layers", "prenet layers"),
    ("tte.prenet_dim", "prenet width"),
    ("tte.decoder_layers", "TTE decoder LSTM layers"),
    ("tte.decoder_cells", "TTE decoder LSTM cells"),
    ("tte.postnet_layers", "postnet convolution layers"),
    ("tte.postnet_channels", "postnet channels"),
    ("tte.postnet_width", "postnet convolution width (odd)"),
    ("tte.dropout", "dropout after TTE convolutions during training"),
    ("tte.prenet_dropout", "prenet dropout, also active at inference"),
    ("tte.zoneout", "zoneout on the TTE decoder during training"),
    ("lm.embed_dim", "LM embedding size"),
    ("lm.cells", "LM LSTM cells"),
    ("lm.layers", "LM LSTM layers"),
    ("train.sup_epochs", "supervised ASR pre-training epochs"),
    ("train.sup_batch", "supervised minibatch size"),
    ("train.sup_lr", "supervised learning rate"),
    ("train.tte_epochs", "TTE training epochs"),
    ("train.tte_batch", "TTE minibatch size"),
    ("train.tte_lr", "TTE learning rate"),
    ("train.lm_epochs", "LM training epochs"),
    ("train.lm_batch", "LM minibatch size"),
    ("train.lm_lr", "LM learning rate"),
    ("train.cycle_epochs", "alternating-training epochs (passes over the unpaired set)"),
    ("train.paired_steps", "paired batches per round of the alternating schedule"),
    ("train.unpaired_steps", "unpaired batches per round of the alternating schedule"),
    ("train.paired_batch", "paired minibatch size during alternating training"),
    ("train.unpaired_batch", "unpaired minibatch size"),
    ("train.paired_lr", "learning rate of paired steps"),
    ("train.unpaired_lr", "learning rate of unpaired steps"),
    ("train.samples", "hypotheses sampled per utterance for the cycle loss"),
    ("train.temperature", "sampling temperature"),
    ("train.baseline", "REINFORCE baseline: loo (leave-one-out) or mean"),
    ("train.ce_weight", "weight of the pseudo-label cross-entropy"),
    ("train.ce_samples", "sampled pseudo-labels per utterance in ce5 mode"),
    ("train.val_beam", "beam width for validation CER/WER"),
    ("decode.beam", "beam width"),
    ("decode.min_ratio", "minimum output length as a fraction of encoder frames"),
    ("decode.max_ratio", "maximum output length as a fraction of encoder frames"),
    ("decode.lm_weight", "shallow-fusion LM weight"),
    ("decode.stop_threshold", "TTE stop probability that ends free-running generation"),
    ("decode.max_frames", "TTE free-running frame limit"),
];

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cur = cur.get_mut(*part).expect("key checked against the defaults");
    }
    if let Value::Object(m) = cur {
        m.insert(parts[parts.len() - 1].to_string(), value);
    }
}

/// Parses `raw` as the same JSON kind as `like`.
fn typed_value(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let bad = || Error::Config(format!("bad value `{raw}` for {key}"));
    match like {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad()),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).map_err(|_| bad()),
        Value::Number(_) => {
            let x = raw.parse::<f64>().map_err(|_| bad())?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(bad)
        }
        _ => Err(bad()),
    }
}

impl RunConfig {
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Applies `key=value` overrides in order. Unknown keys are rejected.
    /// `tte.target_dim` follows the ASR encoder width unless set explicitly.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let flat = self.flat();
        let mut root = serde_json::to_value(self).expect("config serializes");
        let mut target_dim_set = false;
        for (key, raw) in pairs {
            let like = flat
                .get(key)
                .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
            target_dim_set |= key == "tte.target_dim";
            set_path(&mut root, key, typed_value(key, raw.trim(), like)?);
        }
        let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        if !target_dim_set {
            cfg.tte.target_dim = 2 * cfg.asr.encoder_cells;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_overrides(text: &str) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pairs = Self::parse_overrides(&text)?;
        Self::default().with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Writes every key with its value, one per line.
    pub fn to_file_string(&self) -> String {
        let flat = self.flat();
        let mut out = String::new();
        for (key, doc) in KEY_DOCS {
            let v = match &flat[*key] {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{key} = {v}  # {doc}");
        }
        out
    }

    /// Table of keys, defaults and descriptions for help output.
    pub fn help_table() -> String {
        let mut out = String::from("Configuration keys (--set key=value or --config FILE):\n");
        let flat = Self::default().flat();
        for (key, doc) in KEY_DOCS {
            let _ = writeln!(out, "  {key:<24} {:<8} {doc}", flat[*key].to_string().trim_matches('"'));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.asr.validate()?;
        self.tte.validate()?;
        if self.asr.feature_dim != self.synth.dim {
            return Err(Error::Config(format!(
                "asr.feature_dim {} differs from synth.dim {}",
                self.asr.feature_dim, self.synth.dim
            )));
        }
        if self.tte.target_dim != 2 * self.asr.encoder_cells {
            return Err(Error::Config("tte.target_dim must be 2 * asr.encoder_cells".into()));
        }
        if self.data.words_min < 1 || self.data.words_min > self.data.words_max {
            return Err(Error::Config("need 1 <= data.words_min <= data.words_max".into()));
        }
        self.baseline()?;
        self.beam().validate()?;
        self.schedule()?.validate()?;
        if !(0.0 < self.decode.stop_threshold && self.decode.stop_threshold < 1.0) {
            return Err(Error::Config("decode.stop_threshold must be in (0, 1)".into()));
        }
        if self.decode.lm_weight < 0.0 {
            return Err(Error::Config("decode.lm_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn words(&self) -> (usize, usize) {
        (self.data.words_min, self.data.words_max)
    }

    pub fn baseline(&self) -> Result<BaselineKind> {
        match self.train.baseline.as_str() {
            "loo" => Ok(BaselineKind::LeaveOneOut),
            "mean" => Ok(BaselineKind::BatchMean),
            other => Err(Error::Config(format!("train.baseline must be loo or mean, got `{other}`"))),
        }
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam: self.decode.beam,
            min_ratio: self.decode.min_ratio,
            max_ratio: self.decode.max_ratio,
        }
    }

    pub fn supervised(&self) -> SupervisedConfig {
        SupervisedConfig {
            epochs: self.train.sup_epochs,
            batch_size: self.train.sup_batch,
            seed: self.seed,
        }
    }

    pub fn tte_train(&self) -> TteTrainConfig {
        TteTrainConfig {
            epochs: self.train.tte_epochs,
            batch_size: self.train.tte_batch,
            seed: self.seed,
        }
    }

    pub fn lm_train(&self) -> LmTrainConfig {
        LmTrainConfig {
            epochs: self.train.lm_epochs,
            batch_size: self.train.lm_batch,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> Result<ScheduleConfig> {
        let t = &self.train;
        Ok(ScheduleConfig {
            epochs: t.cycle_epochs,
            paired_steps: t.paired_steps,
            unpaired_steps: t.unpaired_steps,
            paired_batch: t.paired_batch,
            unpaired_batch: t.unpaired_batch,
            paired_lr: t.paired_lr,
            unpaired_lr: t.unpaired_lr,
            cycle: CycleConfig {
                samples: t.samples,
                temperature: t.temperature,
                max_ratio: self.decode.max_ratio,
                baseline: self.baseline()?,
            },
            ce_weight: t.ce_weight,
            ce_samples: t.ce_samples,
            label_beam: self.beam(),
            val_beam: BeamConfig {
                beam: t.val_beam,
                ..self.beam()
            },
            seed: self.seed,
        })
    }
}
