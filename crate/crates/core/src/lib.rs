pub mod boost;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod flows;
pub mod objectives;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
