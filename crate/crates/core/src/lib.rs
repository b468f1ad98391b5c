//! Continual-learning engine built around generative replay in embedding
//! space: a dense-tensor autodiff substrate, a conditional multi-scale
//! normalizing flow, a sparse autoencoder with per-task classifier heads,
//! the three-phase training loop that ties them together, and the
//! score-matrix evaluation protocol.

pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
