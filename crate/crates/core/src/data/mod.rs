//! Vocabulary, utterances, the synthetic corpus generator, dataset files and batching.

mod batch;
mod io;
mod synth;
mod vocab;

pub use batch::{batchify, Batch};
pub use io::{dataset_to_string, load_dataset, load_texts, parse_dataset, save_dataset, save_texts};
pub use synth::{corpus_splits, generate_with_prefix, synth_generate, CorpusSizes, Splits, SynthSpec, SynthWorld};
pub use vocab::{Vocab, EOS, PAD, SOS};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// `T x D` feature matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 || data.len() != frames * dim {
            return Err(Error::Input(format!(
                "{} feature values for {frames} frames of dim {dim}",
                data.len()
            )));
        }
        Ok(FeatureSequence { frames, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Input(format!(
                "feature row {bad} has width {}, expected {dim}",
                rows[bad].len()
            )));
        }
        FeatureSequence::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn to_var(&self, g: &Graph) -> Result<Var> {
        g.constant(self.data.clone(), self.frames, self.dim)
    }
}

/// One corpus entry. Paired utterances carry both fields, untranscribed audio
/// only features, text-only entries only text.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Option<FeatureSequence>,
    pub text: Option<String>,
}

impl Utterance {
    pub fn paired(id: impl Into<String>, features: FeatureSequence, text: impl Into<String>) -> Self {
        Utterance {
            id: id.into(),
            features: Some(features),
            text: Some(text.into()),
        }
    }

    /// The same utterance with its transcript removed.
    pub fn without_text(&self) -> Self {
        Utterance {
            text: None,
            ..self.clone()
        }
    }

    pub fn without_features(&self) -> Self {
        Utterance {
            features: None,
            ..self.clone()
        }
    }

    pub fn require_features(&self) -> Result<&FeatureSequence> {
        self.features
            .as_ref()
            .ok_or_else(|| Error::Input(format!("utterance {} has no features", self.id)))
    }

    pub fn require_text(&self) -> Result<&str> {
        self.text
            .as_deref()
            .ok_or_else(|| Error::Input(format!("utterance {} has no transcript", self.id)))
    }
}
