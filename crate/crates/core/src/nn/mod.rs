//! Neural building blocks shared by the ASR, TTE and LM models.

mod attention;
mod conv;
mod linear;
mod lstm;
mod norm;
mod regularize;

pub use attention::{AttentionMode, AttentionState, LocationAttention};
pub use conv::Conv1d;
pub use linear::{Embedding, Linear};
pub use lstm::{blstm_encode, subsampled_len, BlstmLayer, LstmParams, LstmState};
pub use norm::{LayerNorm, NORM_EPS};
pub use regularize::{dropout, stochastic_regularizer, zoneout, Regularizer};

/// Scale of the uniform weight initialization.
pub const INIT_SCALE: f64 = 0.1;
