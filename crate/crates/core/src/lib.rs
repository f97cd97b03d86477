pub mod bench;
pub mod bspline;
pub mod cli;
pub mod codec;
pub mod error;
pub mod exec;
pub mod flow;
pub mod metrics;
pub mod refit;
pub mod seed;
pub mod sim;
pub mod trajio;

pub use error::{Error, Result};
