//! Minimal reverse-mode automatic differentiation over dense f64 tensors,
//! plus the AdamW optimizer used to train the two networks.

mod params;
mod tape;


pub use params::{adamw_step, OptimizerConfig, ParamId, ParamStore};
pub use tape::{ReduceMode, Tape, TensorError, TensorId};
