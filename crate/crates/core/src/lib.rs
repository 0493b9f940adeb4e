pub mod cli;
pub mod diffcore;
pub mod diffusion;
pub mod error;
pub mod oracle;
pub mod policy_opt;
pub mod sampler;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
