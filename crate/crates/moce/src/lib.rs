pub mod error;
pub mod frechet;
pub mod fusion;
pub mod hyperbolicity;
pub mod layers;
pub mod lorentz;
pub mod model;
pub mod control;
pub mod train;
pub mod num;
pub mod stats;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
