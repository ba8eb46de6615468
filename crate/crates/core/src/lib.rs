pub mod autodiff;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod kernels;
pub mod ridge;
pub mod inference;
pub mod context;
pub mod embedding;
pub mod tasks;
pub mod runner;
