pub mod checkpoint;
pub mod cli;
pub mod cointeractive;
pub mod config;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
