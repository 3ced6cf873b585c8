//! Workbench for phenotypic screening models: synthetic screens, profile
//! preprocessing, residual MLP backbones with manual backpropagation,
//! inverse-biological-process pretraining and frozen probing, arena metrics,
//! an experiment-grid runner and scaling-law fits.

pub mod arena;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod prep;
pub mod rng;
pub mod scaling;
pub mod train;
pub mod zoo;
