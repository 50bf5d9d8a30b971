//! Distribution matching distillation guided by gradient-scored preference
//! optimization, on labelled Gaussian-mixture worlds with exact teachers.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the width used by the training harness.

pub mod dmd;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gdmd;
pub mod nn;
pub mod reward;
pub mod scalar;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Mlp64 = nn::Mlp<f64>;
pub type Mlp32 = nn::Mlp<f32>;
pub type MlpGrads64 = nn::MlpGrads<f64>;
pub type OptimizerState64 = nn::OptimizerState<f64>;
pub type TeacherModel64 = teacher::TeacherModel<f64>;
pub type FakeScore64 = dmd::FakeScore<f64>;
pub type TrainState64 = gdmd::TrainState<f64>;
pub type GradientGroup64 = gdmd::GradientGroup<f64>;
