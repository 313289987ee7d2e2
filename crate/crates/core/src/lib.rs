pub mod autograd;
pub mod auxiliary;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod episode;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use fusion::FusionVariant;
pub use metrics::MetricId;
pub use model::{Model, ModelConfig};
pub use optim::{ParamId, ParamStore, Sgd, SgdConfig};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
