pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod noise;
pub mod rawproc;
pub mod scene;
pub mod snr;
pub mod tensorio;
pub mod train;

pub use error::{Error, Result};
