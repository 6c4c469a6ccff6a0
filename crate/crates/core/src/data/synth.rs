use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::{seeded, SeededRng};

/// Parameters of the synthetic speech-like corpus.
///
/// Each character owns a fixed prototype vector; an utterance repeats the
/// prototype of every character for a random number of frames, then applies a
/// per-utterance affine "speaker" transform and frame noise. Texts are word
/// sequences drawn from a small lexicon with a first-order successor structure,
/// so a language model has something to learn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Number of letters; the vocabulary is these letters plus the space.
    pub letters: usize,
    pub dim: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    /// Frame noise standard deviation.
    pub noise: f64,
    /// Standard deviation of the per-utterance offset vector.
    pub speaker_offset: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub lexicon_size: usize,
    pub word_min: usize,
    pub word_max: usize,
    /// Allowed next words per word.
    pub successors: usize,
    /// Seed for prototypes and lexicon, shared by every split of a corpus.
    pub world_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            letters: 8,
            dim: 8,
            dur_min: 5,
            dur_max: 7,
            noise: 0.3,
            speaker_offset: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
            lexicon_size: 12,
            word_min: 2,
            word_max: 4,
            successors: 3,
            world_seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.letters == 0 || self.letters > 26 {
            return bad("letters must be in 1..=26");
        }
        if self.dim == 0 {
            return bad("feature dim must be positive");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return bad("need 1 <= dur_min <= dur_max");
        }
        if !(self.noise >= 0.0 && self.speaker_offset >= 0.0) {
            return bad("noise and speaker offset must be nonnegative");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("need 0 < scale_min <= scale_max");
        }
        if self.lexicon_size == 0 || self.word_min == 0 || self.word_min > self.word_max {
            return bad("need a nonempty lexicon and 1 <= word_min <= word_max");
        }
        if self.successors == 0 {
            return bad("successors must be positive");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let letters = (b'a'..).take(self.letters).map(char::from);
        Vocab::new(letters.chain([' '])).expect("letters are distinct")
    }
}

/// Prototypes and lexicon derived from a [`SynthSpec`].
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    pub vocab: Vocab,
    /// One prototype per vocabulary character, in vocabulary order.
    pub prototypes: Vec<Vec<f64>>,
    pub lexicon: Vec<String>,
    next_words: Vec<Vec<usize>>,
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = spec.vocab();
        let mut rng = seeded(spec.world_seed, 0);
        let prototypes = vocab
            .chars()
            .iter()
            .map(|_| (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let letters = &vocab.chars()[..spec.letters];
        let mut lexicon: Vec<String> = Vec::new();
        let mut attempts = 0;
        while lexicon.len() < spec.lexicon_size {
            let len = rng.random_range(spec.word_min..=spec.word_max);
            let word: String = (0..len).map(|_| *letters.choose(&mut rng).unwrap()).collect();
            attempts += 1;
            if !lexicon.contains(&word) || attempts > 100 * spec.lexicon_size {
                lexicon.push(word);
            }
        }
        let next_words = (0..spec.lexicon_size)
            .map(|_| {
                (0..spec.successors)
                    .map(|_| rng.random_range(0..spec.lexicon_size))
                    .collect()
            })
            .collect();
        Ok(SynthWorld {
            spec: spec.clone(),
            vocab,
            prototypes,
            lexicon,
            next_words,
        })
    }

    /// A sentence of `words.0..=words.1` lexicon words joined by single spaces.
    pub fn sample_text<R: Rng + ?Sized>(&self, rng: &mut R, words: (usize, usize)) -> String {
        let n = rng.random_range(words.0..=words.1);
        let mut w = rng.random_range(0..self.lexicon.len());
        let mut out = self.lexicon[w].clone();
        for _ in 1..n {
            w = *self.next_words[w].choose(rng).unwrap();
            out.push(' ');
            out.push_str(&self.lexicon[w]);
        }
        out
    }

    /// Features for `text` with freshly drawn durations, speaker transform and noise.
    pub fn render<R: Rng + ?Sized>(&self, text: &str, rng: &mut R) -> Result<FeatureSequence> {
        let s = &self.spec;
        let ids = self.vocab.encode(text)?;
        if ids.is_empty() {
            return Err(Error::Input("cannot render an empty text".into()));
        }
        let offset: Vec<f64> = (0..s.dim)
            .map(|_| s.speaker_offset * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let scale = if s.scale_max > s.scale_min {
            rng.random_range(s.scale_min..=s.scale_max)
        } else {
            s.scale_min
        };
        let mut data = Vec::new();
        for id in ids {
            let proto = &self.prototypes[id - 3];
            for _ in 0..rng.random_range(s.dur_min..=s.dur_max) {
                for (p, o) in proto.iter().zip(&offset) {
                    let noise: f64 = StandardNormal.sample(rng);
                    data.push(scale * p + o + s.noise * noise);
                }
            }
        }
        FeatureSequence::new(data.len() / s.dim, s.dim, data)
    }
}

fn utterance_rng(seed: u64, index: usize) -> SeededRng {
    seeded(seed, index as u64 + 1)
}

/// `n_utts` paired utterances of `words.0..=words.1` words each, ids `{prefix}{i:04}`.
pub fn generate_with_prefix(
    world: &SynthWorld,
    n_utts: usize,
    words: (usize, usize),
    seed: u64,
    prefix: &str,
) -> Result<Vec<Utterance>> {
    if words.0 == 0 || words.0 > words.1 {
        return Err(Error::Config(format!(
            "word count range {}..={} is invalid",
            words.0, words.1
        )));
    }
    (0..n_utts)
        .map(|i| {
            let mut rng = utterance_rng(seed, i);
            let text = world.sample_text(&mut rng, words);
            let features = world.render(&text, &mut rng)?;
            Ok(Utterance::paired(format!("{prefix}{i:04}"), features, text))
        })
        .collect()
}

/// Paired synthetic utterances; `len_range` is the number of words per utterance.
pub fn synth_generate(
    spec: &SynthSpec,
    n_utts: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Vec<Utterance>> {
    let world = SynthWorld::new(spec)?;
    generate_with_prefix(&world, n_utts, len_range, seed, "utt")
}

/// Number of utterances per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub paired: usize,
    pub unpaired: usize,
    pub text: usize,
    pub val: usize,
    pub eval: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            paired: 50,
            unpaired: 200,
            text: 300,
            val: 30,
            eval: 30,
        }
    }
}

/// A full benchmark corpus. `unpaired` has features only; its transcripts are
/// kept apart in `unpaired_text` and are used only by the oracle setting.
#[derive(Debug, Clone)]
pub struct Splits {
    pub paired: Vec<Utterance>,
    pub unpaired: Vec<Utterance>,
    pub unpaired_text: Vec<Utterance>,
    pub text: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub eval: Vec<Utterance>,
}

pub fn corpus_splits(
    spec: &SynthSpec,
    sizes: CorpusSizes,
    words: (usize, usize),
    seed: u64,
) -> Result<Splits> {
    let world = SynthWorld::new(spec)?;
    let split = |n, stream: u64, prefix: &str| {
        generate_with_prefix(&world, n, words, seed.wrapping_mul(31).wrapping_add(stream), prefix)
    };
    let unpaired_full = split(sizes.unpaired, 2, "unpaired-")?;
    Ok(Splits {
        paired: split(sizes.paired, 1, "paired-")?,
        unpaired: unpaired_full.iter().map(Utterance::without_text).collect(),
        unpaired_text: unpaired_full.iter().map(Utterance::without_features).collect(),
        text: split(sizes.text, 3, "text-")?
            .iter()
            .map(Utterance::without_features)
            .collect(),
        val: split(sizes.val, 4, "val-")?,
        eval: split(sizes.eval, 5, "eval-")?,
    })
}
