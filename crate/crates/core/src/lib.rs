//! Battery prognostics engine: a multi-task SOH/RUL network (multi-scale
//! convolutional feature extraction, an exponentially-gated extended LSTM,
//! dual-stream polarized + sparse attention, and two regression heads) built
//! on a minimal self-contained f64 tensor/autodiff core, together with data
//! ingestion, training, evaluation, metrics and hyperparameter search.

pub mod dataio;
pub mod dsam;
pub mod error;
pub mod fem;
pub mod hsearch;
pub mod ielstm;
mod init;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

/// Derive a child seed from a base seed and a stream index.
///
/// Distinct streams (cells, attention heads, trials, samples) get
/// decorrelated generators from one user-facing seed. The multiplier is the
/// 64-bit golden-ratio constant; `stream + 1` keeps stream 0 from collapsing
/// onto the base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
