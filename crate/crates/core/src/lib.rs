pub mod cli;
pub mod client;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod gradcheck;
pub mod io;
pub mod matching;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
