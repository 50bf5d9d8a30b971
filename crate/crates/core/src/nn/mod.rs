//! Dense networks, their gradients, and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod mlp;

pub use adam::{AdamConfig, OptimizerState};
pub use mlp::{time_embedding, Activation, Dense, ForwardCache, Mlp, MlpConfig, MlpGrads};
