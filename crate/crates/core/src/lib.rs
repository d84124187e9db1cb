pub mod analysis;
pub mod cli;
pub mod deformconv;
pub mod dtcn;
pub mod error;
pub mod frames;
pub mod mixsim;
pub mod numcore;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
