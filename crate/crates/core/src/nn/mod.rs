//! Numeric substrate: dense matrices, MLP parameters and forward passes,
//! reverse-mode autodiff, the digamma special function, PCA latent sizing,
//! and the Adam optimizer.

pub mod adam;
pub mod mlp;
pub mod pca;
pub mod special;
pub mod tape;
pub mod tensor;
pub mod training;

pub use adam::Adam;
pub use mlp::{mlp_forward, Activation, MlpSpec, ParameterSet};
pub use pca::{covariance, jacobi_eigen, pca_latent_dim};
pub use special::digamma;
pub use tape::{mlp_on_tape, mse_on_tape, register_layers, Gradients, NodeId, ParamId, Tape};
pub use tensor::Matrix;
pub use training::{run_epochs, TrainReport, TrainSettings};
