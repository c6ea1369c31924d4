//! Differentiable computation, models and optimizer.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{mlp_forward, transformer_forward, Arch, ModelConfig, ModelParams};
pub use params::{ParamId, ParamStore};
pub use tape::{Graph, Var};
