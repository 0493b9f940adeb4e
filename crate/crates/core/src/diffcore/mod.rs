//! Dense numerical core: parameter storage, a reverse-mode tape, the
//! transformer denoiser, AdamW, and checkpoint I/O.

mod checkpoint;
mod model;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{config_hash, Checkpoint, CheckpointHeader, TensorEntry, MAGIC};
pub use model::{forward_logits, infer_logits, randomize, DenoiserConfig};
pub use optim::{AdamConfig, OptimizerState, StepStats};
pub use params::{GradStore, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{log_softmax_row, softmax_row, Real, Tensor};
