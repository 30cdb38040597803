pub mod bundle;
pub mod error;
pub mod gradcam;
pub mod graph;
pub mod imageio;
pub mod latent;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod render;
pub mod service;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{LcxError, Result};
pub use tensor::{ImageTensor, LatentVector, Tensor};
