//! Reverse-mode automatic differentiation over dense `f64` matrices.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod parallel;
mod param;
mod primitive;

pub use checkpoint::{Checkpoint, Entry, FORMAT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradReport};
pub use graph::{Gradients, Graph, Var, PROB_CLAMP};
pub use optim::Adam;
pub use parallel::accumulate;
pub use param::{Module, Param, ParamId, ParamList};
pub use primitive::{Attrs, Primitive};
