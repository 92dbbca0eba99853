//! A from-scratch volumetric deep-learning toolkit.
//!
//! The crate trains a stacked 3D convolutional autoencoder with tied decoder
//! weights, transplants its encoder into a deeply supervised 3D
//! convolutional classifier, and evaluates the result with confusion-matrix
//! metrics, ROC/AUC, stratified cross-validation, and t-SNE feature
//! projection. A synthetic phantom generator provides volumetric data with a
//! controllable class signal.
//!
//! Modules map onto the pipeline stages:
//! - [`volume`]: dense 4D tensors, VOL3 file I/O, dataset manifests, task
//!   relabeling, phantoms.
//! - [`nnops`]: differentiable 3D convolution, max pooling, activations,
//!   softmax and the classification loss.
//! - [`optim`]: SGD and Adadelta update rules.
//! - [`cae`]: tied-weight autoencoder layers and greedy stack pretraining.
//! - [`network`]: the classifier, function-preserving weight transplantation,
//!   deep-supervision fine-tuning.
//! - [`eval`]: metrics, ROC/AUC, stratified k-fold, cross-validation runs,
//!   t-SNE.

pub mod cae;
pub mod error;
pub mod eval;
pub mod network;
pub mod nnops;
pub mod optim;
pub mod scalar;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;
