//! Peer-regularized convolutional networks and the machinery to train and
//! attack them: a small tensor autodiff engine, pixel-level KNN peer graphs,
//! attention-weighted peer aggregation, a model zoo (LeNet/ResNet and their
//! peer-regularized variants), adversarial attacks (iterative gradient,
//! FGSM, universal perturbations) and a deterministic training harness.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod knn;
pub mod models;
pub mod pr;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor};
