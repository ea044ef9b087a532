//! Weight-perturbation regularizers for feedforward networks: Bridgeout,
//! Dropout and Shakeout, with the supporting linear algebra, training loop,
//! GLM penalty checks, dataset readers and an experiment harness.

pub mod data;
pub mod error;
pub mod glm;
pub mod harness;
pub mod network;
pub mod optim;
pub mod regularizer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{Activation, Layer, Loss, Network};
pub use optim::{train, TrainConfig};
pub use regularizer::{RegularizerConfig, RegularizerKind};
pub use rng::RngStream;
pub use tensor::Matrix;
