//! Contrastive latent variable models.
//!
//! Given a *target* dataset and a *background* dataset sharing the same
//! feature space, these models recover low-dimensional structure that is
//! enriched in the target relative to the background. Both datasets load
//! onto a shared latent space (loading `S`, dimension `k`), while the target
//! additionally loads onto its own latent space (loading `W`, dimension `t`).
//! The per-row target coordinates in that private space are the quantity of
//! interest for visualization and subgroup discovery.
//!
//! Fitting paths:
//! * [`clvm_em`] — exact expectation-maximization for the Gaussian model.
//! * [`vi_engine`] — black-box variational inference with reparameterization
//!   gradients; supports missing data and the model variants in [`variants`]
//!   (group-sparse or horseshoe target loadings, ARD shared-dimension
//!   selection, Student-t robust likelihood).
//! * [`cvae`] — a contrastive variational autoencoder with MLP
//!   encoders/decoders and amortized inference.
//!
//! [`baselines`] provides PCA/PPCA/cPCA reference implementations, and
//! [`data_model`] the dataset containers, CSV ingestion and synthetic
//! generators used throughout the test suite.

pub mod baselines;
pub mod clvm_em;
pub mod cvae;
pub mod data_model;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model_io;
pub mod num_core;
pub mod variants;
pub mod vi_engine;

pub use error::{ClvmError, Result};
