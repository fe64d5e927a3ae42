pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod matching;
pub mod init;
pub mod model;
pub mod optim;
pub mod params;
pub mod recommend;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
