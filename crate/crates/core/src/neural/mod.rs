//! A small decoder-only transformer with reverse-mode gradients, AdamW and
//! checkpoint files.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use model::{init_model, Decoder, ForwardOut, ModelConfig, Network, ParamGroup, Params, Stage};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use tape::{Gradients, Graph, Var};
pub use tensor::Tensor;
