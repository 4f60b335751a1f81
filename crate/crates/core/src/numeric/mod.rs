//! Dense tensor engine: reverse-mode tape, optimizer and schedules.

pub mod float;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use float::Float;
pub use ops::{cross_entropy, matmul, score_activation, topk_mask, MaskedLogits, ScoreKind};
pub use optim::{adamw_step, clip_grad_norm, grad_norm, AdamW, OptimizerState};
pub use rng::Rng;
pub use schedule::cosine_lr;
pub use tape::{Tape, Var};
pub use tensor::{cast_store, store_numel, ParamStore, Tensor};
