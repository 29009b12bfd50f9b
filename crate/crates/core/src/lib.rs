pub mod autograd;
pub mod checkpoint;
pub mod controllers;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod masked;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod runtime;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use model::ModelConfig;
pub use tensor::Tensor;
