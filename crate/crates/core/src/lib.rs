pub mod error;
pub mod eval;
pub mod experiment;
pub mod grad;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod normalize;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
