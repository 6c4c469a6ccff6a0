use super::{FeatureSequence, Utterance, Vocab, PAD};
use crate::error::{Error, Result};

/// Utterances padded to a common length, with masks marking real positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub dim: usize,
    pub max_frames: usize,
    /// `len x max_frames x dim`, zero frames past each utterance's end.
    pub features: Vec<f64>,
    pub frame_mask: Vec<Vec<bool>>,
    pub max_tokens: usize,
    /// Transcript tokens followed by eos, padded with [`PAD`].
    pub tokens: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded features of entry `i`, if it has any.
    pub fn features_of(&self, i: usize) -> Option<FeatureSequence> {
        let n = self.frame_mask[i].iter().take_while(|&&m| m).count();
        if n == 0 {
            return None;
        }
        let start = i * self.max_frames * self.dim;
        let data = self.features[start..start + n * self.dim].to_vec();
        FeatureSequence::new(n, self.dim, data).ok()
    }

    /// Unpadded tokens (ending in eos) of entry `i`, if it has a transcript.
    pub fn tokens_of(&self, i: usize) -> Option<Vec<usize>> {
        let n = self.token_mask[i].iter().take_while(|&&m| m).count();
        (n > 0).then(|| self.tokens[i][..n].to_vec())
    }
}

fn sort_key(u: &Utterance) -> usize {
    u.features
        .as_ref()
        .map(FeatureSequence::frames)
        .or_else(|| u.text.as_ref().map(|t| t.chars().count()))
        .unwrap_or(0)
}

/// Sorts by length (frames, or characters for text-only entries) and cuts into
/// batches of at most `batch_size`.
pub fn batchify(utts: &[Utterance], vocab: &Vocab, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<&Utterance> = utts.iter().collect();
    order.sort_by_key(|u| sort_key(u));
    order.chunks(batch_size).map(|chunk| build(chunk, vocab)).collect()
}

fn build(chunk: &[&Utterance], vocab: &Vocab) -> Result<Batch> {
    let dims: Vec<usize> = chunk.iter().filter_map(|u| u.features.as_ref()).map(|f| f.dim()).collect();
    let dim = dims.first().copied().unwrap_or(0);
    if dims.iter().any(|&d| d != dim) {
        return Err(Error::Input("utterances in a batch have different feature dims".into()));
    }
    let tokens: Vec<Option<Vec<usize>>> = chunk
        .iter()
        .map(|u| u.text.as_deref().map(|t| vocab.encode_with_eos(t)).transpose())
        .collect::<Result<_>>()?;
    let max_frames = chunk
        .iter()
        .filter_map(|u| u.features.as_ref())
        .map(FeatureSequence::frames)
        .max()
        .unwrap_or(0);
    let max_tokens = tokens.iter().flatten().map(Vec::len).max().unwrap_or(0);

    let mut features = vec![0.0; chunk.len() * max_frames * dim];
    let mut frame_mask = Vec::with_capacity(chunk.len());
    for (i, u) in chunk.iter().enumerate() {
        let mut mask = vec![false; max_frames];
        if let Some(f) = &u.features {
            let start = i * max_frames * dim;
            features[start..start + f.data().len()].copy_from_slice(f.data());
            mask[..f.frames()].fill(true);
        }
        frame_mask.push(mask);
    }
    let mut padded = Vec::with_capacity(chunk.len());
    let mut token_mask = Vec::with_capacity(chunk.len());
    for t in &tokens {
        let mut row = vec![PAD; max_tokens];
        let mut mask = vec![false; max_tokens];
        if let Some(t) = t {
            row[..t.len()].copy_from_slice(t);
            mask[..t.len()].fill(true);
        }
        padded.push(row);
        token_mask.push(mask);
    }
    Ok(Batch {
        ids: chunk.iter().map(|u| u.id.clone()).collect(),
        dim,
        max_frames,
        features,
        frame_mask,
        max_tokens,
        tokens: padded,
        token_mask,
    })
}
