pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod ib_mask;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod train;
