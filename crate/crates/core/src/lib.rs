pub mod agents;
pub mod cli;
pub mod ensemble;
pub mod env;
pub mod error;
pub mod evalx;
pub mod marketdata;
pub mod nn;
pub mod seeds;
pub mod signals;
pub mod vecenv;

pub use error::{Error, Result};
