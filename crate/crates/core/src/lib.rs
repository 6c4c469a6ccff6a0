//! Cycle-consistency training for attention-based speech recognition.
//!
//! An attention encoder-decoder ASR model transcribes feature sequences, a
//! text-to-encoder (TTE) model reconstructs the ASR encoder states from a
//! transcript, and the expected reconstruction error, estimated with
//! REINFORCE, trains the ASR model from untranscribed audio.

pub mod asr;
pub mod bench;
pub mod config;
pub mod cycle;
pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod nn;
pub mod tensor;
pub mod tte;

pub use error::{Error, Result};

/// Deterministic random stream used everywhere randomness is needed.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SeededRng`] from a seed and a stream label.
pub fn seeded(seed: u64, stream: u64) -> SeededRng {
    use rand::SeedableRng;
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
