//! Class-incremental continual learning engine.

pub mod autograd;
pub mod data;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod replay;
pub mod rng;
pub mod run;
pub mod strategies;
pub mod tensor;
