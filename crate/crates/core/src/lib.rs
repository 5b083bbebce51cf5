//! Many-to-many conditional GAN transfer between camera sub-domains.

pub mod autograd;
pub mod checkpoint;
pub mod cost;
pub mod embedding;
pub mod error;
pub mod imageio;
pub mod kernels;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod reid;
pub mod scalar;
pub mod seeds;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type GanModels32 = trainer::GanModels<f32>;
pub type GanModels64 = trainer::GanModels<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
