//! Dense f64 tensor algebra with reverse-mode differentiation and the neural
//! building blocks shared by the speech-BERT and TTS models.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, ParamId, ParamStore, Tensor, TensorError};
