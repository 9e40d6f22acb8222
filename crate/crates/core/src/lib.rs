//! Workbench for training shared-trunk multi-task transformers on modular
//! arithmetic, recording the full parameter trajectory, and comparing
//! compressed reconstructions of the final weights: per-matrix SVD, joint
//! (stacked) SVD, and trajectory PCA, plus gradient-covariance circuit
//! probes.
//!
//! The crate is organized around run directories: `train` produces one,
//! `analyze`/`probe` read it and drop CSV artifacts next to it, and
//! `report` aggregates many runs into summary tables.

pub mod ckpt;
pub mod cli;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod probes;
pub mod recon;
pub mod report;
pub mod rng;
pub mod tasks;
pub mod train;
