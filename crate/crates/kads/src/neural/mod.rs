//! Float64 neural substrate: tensors, an autodiff tape, transformer
//! builders, AdamW, finite-difference gradient checks, and checkpointing.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod optim;
pub mod store;
pub mod tensor;
pub mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, sha256_hex, CheckpointMeta};
pub use gradcheck::grad_check;
pub use graph::{AttnMask, Graph, NodeId};
pub use optim::{adamw_step, OptimConfig};
pub use store::ParamStore;
pub use tensor::Tensor;
pub use transformer::{
    encoder_forward, generator_decode, generator_encode, init_encoder, init_generator, Decode,
    EncoderConfig, GenModelConfig,
};
