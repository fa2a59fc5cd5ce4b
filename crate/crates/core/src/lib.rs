pub mod autograd;
pub mod caption;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod conditioning;
pub mod dataset;
pub mod diffusion;
pub mod eval;
pub mod nn;
pub mod pose;
pub mod synthetic;
pub mod training_data;
